//! Parameter checkpoints: an 8-byte magic, a little-endian u64 header length,
//! a JSON header, then every block's values as little-endian f64 in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ParamBlock;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ADVCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl CheckpointBlock {
    pub fn from_param(p: &ParamBlock) -> Self {
        CheckpointBlock {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            values: p.values.clone(),
        }
    }

    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        CheckpointBlock {
            name: name.into(),
            rows,
            cols,
            values,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    blocks: Vec<CheckpointBlock>,
    meta: Value,
}

/// Named blocks plus free-form metadata (hyperparameters, step counters).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<CheckpointBlock>,
    pub meta: Value,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            blocks: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, block: CheckpointBlock) {
        self.blocks.push(block);
    }

    pub fn block(&self, name: &str) -> Result<&CheckpointBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no block `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for b in &self.blocks {
            if b.values.len() != b.rows * b.cols {
                return Err(Error::invalid(format!("block {} has inconsistent shape", b.name)));
            }
        }
        let header = serde_json::to_vec(&Header {
            blocks: self.blocks.clone(),
            meta: self.meta.clone(),
        })?;
        let n: usize = self.blocks.iter().map(|b| b.values.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse(path, 1, "not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::parse(path, 1, "truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        let mut pos = 16 + hlen;
        let mut blocks = header.blocks;
        for b in &mut blocks {
            let n = b.rows * b.cols;
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::parse(path, 1, format!("truncated data for block {}", b.name)))?;
            b.values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(Error::parse(path, 1, "trailing bytes after checkpoint data"));
        }
        Ok(Checkpoint {
            blocks,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new(json!({"step": 7, "lr": 0.01}));
        c.push(CheckpointBlock::new("a", 2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        c.push(CheckpointBlock::new("b", 1, 3, vec![0.1, 0.2, 0.3]));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta["step"], 7);
        assert!(back.block("missing").is_err());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut c = Checkpoint::new(json!({}));
        c.push(CheckpointBlock::new("a", 1, 2, vec![1.0, 2.0]));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        assert!(Checkpoint::from_bytes(b"garbage-garbage-garbage", Path::new("m")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("m")).is_err());
    }
}
