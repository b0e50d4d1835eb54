use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector4};

use crate::raster::CameraModel;
use crate::{Error, Result, Vec3};

/// KITTI calibration chain: velodyne → reference camera (`Tr_velo_to_cam`),
/// rectification (`R0_rect`), then the left color camera projection (`P2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub velo_to_cam: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
}

fn homogeneous(m: &Matrix3x4<f64>) -> Matrix4<f64> {
    let mut h = Matrix4::identity();
    h.fixed_view_mut::<3, 4>(0, 0).copy_from(m);
    h
}

impl Calibration {
    /// Co-located sensors with the standard axis permutation (x forward,
    /// y left, z up → x right, y down, z forward) and an ideal pinhole.
    pub fn synthetic(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        #[rustfmt::skip]
        let p2 = Matrix3x4::new(
            focal, 0.0,   cx,  0.0,
            0.0,   focal, cy,  0.0,
            0.0,   0.0,   1.0, 0.0,
        );
        #[rustfmt::skip]
        let velo_to_cam = Matrix3x4::new(
            0.0, -1.0,  0.0, 0.0,
            0.0,  0.0, -1.0, 0.0,
            1.0,  0.0,  0.0, 0.0,
        );
        Calibration {
            p2,
            r0_rect: Matrix3::identity(),
            velo_to_cam,
            width,
            height,
        }
    }

    fn velo_to_rect_h(&self) -> Matrix4<f64> {
        let mut r0 = Matrix4::identity();
        r0.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r0_rect);
        r0 * homogeneous(&self.velo_to_cam)
    }

    pub fn velo_to_rect(&self, p: &Vec3) -> Vec3 {
        let h = self.velo_to_rect_h() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(h.x, h.y, h.z)
    }

    pub fn rect_to_velo(&self, p: &Vec3) -> Result<Vec3> {
        let inv = self
            .velo_to_rect_h()
            .try_inverse()
            .ok_or_else(|| Error::invalid("calibration chain is singular"))?;
        let h = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Ok(Vec3::new(h.x, h.y, h.z))
    }

    /// Direction (no translation) from the rectified camera frame to velodyne.
    pub fn rect_dir_to_velo(&self, d: &Vec3) -> Result<Vec3> {
        let inv = self
            .velo_to_rect_h()
            .try_inverse()
            .ok_or_else(|| Error::invalid("calibration chain is singular"))?;
        let h = inv * Vector4::new(d.x, d.y, d.z, 0.0);
        Ok(Vec3::new(h.x, h.y, h.z))
    }

    pub fn velo_dir_to_rect(&self, d: &Vec3) -> Vec3 {
        let h = self.velo_to_rect_h() * Vector4::new(d.x, d.y, d.z, 0.0);
        Vec3::new(h.x, h.y, h.z)
    }

    /// Camera model that projects velodyne-frame points straight to pixels.
    pub fn camera(&self) -> CameraModel {
        let full = self.p2 * self.velo_to_rect_h();
        CameraModel::new(full, self.width, self.height)
    }

    /// `key: values` text in KITTI layout (P0..P3, R0_rect, Tr_velo_to_cam,
    /// Tr_imu_to_velo), written with round-trip precision.
    pub fn to_kitti_string(&self) -> String {
        let mut out = String::new();
        let row = |vals: &[f64]| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let p2: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| self.p2[(r, c)]).collect();
        let r0: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| self.r0_rect[(r, c)]).collect();
        let tr: Vec<f64> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| self.velo_to_cam[(r, c)])
            .collect();
        for k in ["P0", "P1", "P2", "P3"] {
            let _ = writeln!(out, "{k}: {}", row(&p2));
        }
        let _ = writeln!(out, "R0_rect: {}", row(&r0));
        let _ = writeln!(out, "Tr_velo_to_cam: {}", row(&tr));
        let _ = writeln!(out, "Tr_imu_to_velo: {}", row(&[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]));
        out
    }

    /// Parses a KITTI calib file. Image size is not part of the format and
    /// must be supplied.
    pub fn parse(text: &str, path: &Path, width: usize, height: usize) -> Result<Self> {
        let mut p2 = None;
        let mut r0 = None;
        let mut tr = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key: values`"))?;
            let vals = parse_floats(rest, path, i + 1)?;
            let expect = |n: usize| -> Result<()> {
                if vals.len() == n {
                    Ok(())
                } else {
                    Err(Error::parse(path, i + 1, format!("{key} needs {n} values, found {}", vals.len())))
                }
            };
            match key.trim() {
                "P2" => {
                    expect(12)?;
                    p2 = Some(Matrix3x4::from_row_slice(&vals));
                }
                "R0_rect" => {
                    expect(9)?;
                    r0 = Some(Matrix3::from_row_slice(&vals));
                }
                "Tr_velo_to_cam" => {
                    expect(12)?;
                    tr = Some(Matrix3x4::from_row_slice(&vals));
                }
                _ => {}
            }
        }
        let missing = |k: &str| Error::parse(path, 0, format!("missing {k}"));
        Ok(Calibration {
            p2: p2.ok_or_else(|| missing("P2"))?,
            r0_rect: r0.ok_or_else(|| missing("R0_rect"))?,
            velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
            width,
            height,
        })
    }

    pub fn read(path: &Path, width: usize, height: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, width, height)
    }
}

/// Whitespace-separated finite decimals.
pub(crate) fn parse_floats(s: &str, path: &Path, line: usize) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, line, format!("not a number: {tok:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path, line, format!("non-finite value {tok:?}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::project;

    #[test]
    fn synthetic_chain_looks_forward() {
        let c = Calibration::synthetic(200.0, 160.0, 60.0, 320, 120);
        let rect = c.velo_to_rect(&Vec3::new(10.0, 1.0, -1.0));
        assert_eq!(rect, Vec3::new(-1.0, 1.0, 10.0));
        let back = c.rect_to_velo(&rect).unwrap();
        assert!((back - Vec3::new(10.0, 1.0, -1.0)).norm() < 1e-12);
        let (u, v, d) = project(&c.camera(), &Vec3::new(10.0, 0.0, 0.0)).unwrap();
        assert_eq!((u, v, d), (160.0, 60.0, 10.0));
        let (u, _, _) = project(&c.camera(), &Vec3::new(10.0, 1.0, 0.0)).unwrap();
        assert!(u < 160.0, "points to the left land left of center");
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = Calibration::synthetic(721.5377, 609.5593, 172.854, 1242, 375);
        c.velo_to_cam[(0, 3)] = -4.069766e-03;
        c.r0_rect[(0, 1)] = 9.8756e-03;
        let text = c.to_kitti_string();
        let back = Calibration::parse(&text, Path::new("calib.txt"), 1242, 375).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_calibration_is_rejected() {
        let p = Path::new("c.txt");
        assert!(Calibration::parse("P2: 1 2 3\n", p, 1, 1).is_err());
        assert!(Calibration::parse("R0_rect 1 0 0\n", p, 1, 1).is_err());
        let bad = "P2: 1 0 0 0 0 1 0 0 0 0 1 nan\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        match Calibration::parse(bad, p, 1, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
