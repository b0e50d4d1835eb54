//! PLY (ASCII and binary little-endian) mesh I/O with per-vertex
//! `red, green, blue` bytes, plus a color-less OBJ writer.
//!
//! Vertex positions are written as `double`, so they round-trip exactly.
//! Colors go out twice: as 8-bit `red, green, blue` for viewers and as
//! `double` `color_r, color_g, color_b`, which the reader prefers.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::TriMesh;
use crate::{Error, Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ply(mesh: &TriMesh, path: &Path, format: PlyFormat) -> Result<()> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property double color_r\nproperty double color_g\nproperty double color_b\nelement face {}\n\
         property list uchar int vertex_indices\nend_header\n",
        mesh.vertex_count(),
        mesh.face_count()
    )
    .expect("write to Vec");
    match format {
        PlyFormat::Ascii => {
            for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
                writeln!(
                    out,
                    "{} {} {} {} {} {} {} {} {}",
                    v.x,
                    v.y,
                    v.z,
                    to_byte(c[0]),
                    to_byte(c[1]),
                    to_byte(c[2]),
                    c[0],
                    c[1],
                    c[2]
                )
                .expect("write to Vec");
            }
            for f in &mesh.faces {
                writeln!(out, "3 {} {} {}", f[0], f[1], f[2]).expect("write to Vec");
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
                for k in 0..3 {
                    out.extend_from_slice(&v[k].to_le_bytes());
                }
                out.extend(c.iter().map(|&x| to_byte(x)));
                for x in c {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            for f in &mesh.faces {
                out.push(3);
                for &i in f {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    U8,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "uchar" | "uint8" | "char" | "int8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 => 1,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::U8 => bytes[0] as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    binary: bool,
    vertex_count: usize,
    face_count: usize,
    vertex_props: Vec<(String, Scalar)>,
    face_list: (Scalar, Scalar),
    body_offset: usize,
    header_lines: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::parse(path, 1, "missing end_header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse(path, 1, "header is not UTF-8"))?;
    let mut h = Header {
        binary: false,
        vertex_count: 0,
        face_count: 0,
        vertex_props: Vec::new(),
        face_list: (Scalar::U8, Scalar::I32),
        body_offset: end + 11,
        header_lines: text.lines().count() + 1,
    };
    let mut current = "";
    for (ln, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::parse(path, ln + 1, msg.to_string());
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => h.binary = false,
            ["format", "binary_little_endian", _] => h.binary = true,
            ["format", other, _] => return Err(bad(&format!("unsupported format {other}"))),
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| bad("bad element count"))?;
                current = if *name == "vertex" {
                    h.vertex_count = count;
                    "vertex"
                } else if *name == "face" {
                    h.face_count = count;
                    "face"
                } else {
                    return Err(bad(&format!("unsupported element {name}")));
                };
            }
            ["property", "list", cnt, idx, _] if current == "face" => {
                h.face_list = (
                    Scalar::parse(cnt).ok_or_else(|| bad("bad list count type"))?,
                    Scalar::parse(idx).ok_or_else(|| bad("bad list index type"))?,
                );
            }
            ["property", ty, name] if current == "vertex" => {
                let ty = Scalar::parse(ty).ok_or_else(|| bad(&format!("unsupported type {ty}")))?;
                h.vertex_props.push((name.to_string(), ty));
            }
            _ => return Err(bad(&format!("unrecognized header line `{line}`"))),
        }
    }
    Ok(h)
}

pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    let prop = |name: &str| h.vertex_props.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (prop("x"), prop("y"), prop("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(path, 1, "vertex element lacks x/y/z")),
    };
    let color_idx = match (prop("color_r"), prop("color_g"), prop("color_b")) {
        (Some(r), Some(g), Some(b)) => Some(([r, g, b], 1.0)),
        _ => match (prop("red"), prop("green"), prop("blue")) {
            (Some(r), Some(g), Some(b)) => {
                let scale = if h.vertex_props[r].1 == Scalar::U8 { 255.0 } else { 1.0 };
                Some(([r, g, b], scale))
            }
            _ => None,
        },
    };

    let mut vertices = Vec::with_capacity(h.vertex_count);
    let mut colors = Vec::with_capacity(h.vertex_count);
    let mut faces = Vec::with_capacity(h.face_count);
    let push_vertex = |vals: &[f64], vertices: &mut Vec<Vec3>, colors: &mut Vec<[f64; 3]>| {
        vertices.push(Vec3::new(vals[xi], vals[yi], vals[zi]));
        colors.push(match color_idx {
            Some((ci, scale)) => [vals[ci[0]] / scale, vals[ci[1]] / scale, vals[ci[2]] / scale],
            None => super::MID_GRAY,
        });
    };

    if h.binary {
        let body = &bytes[h.body_offset..];
        let mut pos = 0;
        let truncated = || Error::parse(path, h.header_lines, "binary body truncated");
        let mut vals = vec![0.0; h.vertex_props.len()];
        for _ in 0..h.vertex_count {
            for (k, (_, ty)) in h.vertex_props.iter().enumerate() {
                let n = ty.size();
                let chunk = body.get(pos..pos + n).ok_or_else(truncated)?;
                vals[k] = ty.read_le(chunk);
                pos += n;
            }
            push_vertex(&vals, &mut vertices, &mut colors);
        }
        let (cnt_ty, idx_ty) = h.face_list;
        for fi in 0..h.face_count {
            let chunk = body.get(pos..pos + cnt_ty.size()).ok_or_else(truncated)?;
            let count = cnt_ty.read_le(chunk) as usize;
            pos += cnt_ty.size();
            if count != 3 {
                return Err(Error::parse(path, h.header_lines, format!("face {fi} has {count} vertices")));
            }
            let mut f = [0usize; 3];
            for slot in &mut f {
                let chunk = body.get(pos..pos + idx_ty.size()).ok_or_else(truncated)?;
                *slot = idx_ty.read_le(chunk) as usize;
                pos += idx_ty.size();
            }
            faces.push(f);
        }
    } else {
        let body = std::str::from_utf8(&bytes[h.body_offset..])
            .map_err(|_| Error::parse(path, h.header_lines, "ascii body is not UTF-8"))?;
        let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let line_no = |i: usize| h.header_lines + i + 1;
        for _ in 0..h.vertex_count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, h.header_lines, "missing vertex lines"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, line_no(i), "bad vertex value"))?;
            if vals.len() != h.vertex_props.len() {
                return Err(Error::parse(path, line_no(i), "vertex property count mismatch"));
            }
            push_vertex(&vals, &mut vertices, &mut colors);
        }
        for _ in 0..h.face_count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, h.header_lines, "missing face lines"))?;
            let idx: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, line_no(i), "bad face index"))?;
            if idx.len() != 4 || idx[0] != 3 {
                return Err(Error::parse(path, line_no(i), "only triangular faces are supported"));
            }
            faces.push([idx[1], idx[2], idx[3]]);
        }
    }
    if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::parse(path, h.header_lines, "non-finite vertex coordinate"));
    }
    TriMesh::new(vertices, faces, colors)
}

/// OBJ export of positions and faces only.
pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
