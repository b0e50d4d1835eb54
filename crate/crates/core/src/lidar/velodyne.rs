//! KITTI velodyne scans: little-endian f32 `(x, y, z, reflectance)` records.

use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::{Error, Result, Vec3};

const RECORD: usize = 16;

pub fn velodyne_to_bytes(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * RECORD);
    for (p, r) in pc.points.iter().zip(&pc.reflectance) {
        for x in [p.x, p.y, p.z, *r] {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn velodyne_from_bytes(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::parse(
            path,
            1,
            format!("size {} is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let mut pc = PointCloud::default();
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let f: Vec<f64> = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(path, i + 1, "non-finite value in point record"));
        }
        pc.points.push(Vec3::new(f[0], f[1], f[2]));
        pc.reflectance.push(f[3]);
    }
    Ok(pc)
}

pub fn read_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    velodyne_from_bytes(&bytes, path)
}

pub fn write_velodyne(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, velodyne_to_bytes(pc)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_file() {
        let mut bytes = Vec::new();
        for x in [1.0f32, 2.0, 3.0, 0.25, -4.5, 0.0, 1e-3, 1.0] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(bytes.len(), 32);
        let pc = velodyne_from_bytes(&bytes, Path::new("two.bin")).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(pc.points[1], Vec3::new(-4.5, 0.0, 1e-3f32 as f64));
        assert_eq!(pc.reflectance, vec![0.25, 1.0]);
    }

    #[test]
    fn rejects_bad_sizes_and_nan() {
        assert!(velodyne_from_bytes(&[0u8; 17], Path::new("x")).is_err());
        let mut bytes = vec![0u8; 16];
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(velodyne_from_bytes(&bytes, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(raw in proptest::collection::vec(-1e4f32..1e4f32, 0..64)) {
            let n = raw.len() / 4 * 4;
            let bytes: Vec<u8> = raw[..n].iter().flat_map(|x| x.to_le_bytes()).collect();
            let pc = velodyne_from_bytes(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(velodyne_to_bytes(&pc), bytes);
            let again = velodyne_from_bytes(&velodyne_to_bytes(&pc), Path::new("p")).unwrap();
            prop_assert_eq!(again, pc);
        }
    }
}
