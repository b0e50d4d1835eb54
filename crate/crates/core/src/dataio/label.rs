//! KITTI object label lines:
//! `type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::calib::{parse_floats, Calibration};
use crate::victim::{wrap_angle, Box2D, Box3D};
use crate::{Error, Result, Vec3};

pub const LABEL_FIELDS: usize = 15;

const KNOWN_CLASSES: [&str; 9] = [
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Cyclist",
    "Tram",
    "Misc",
    "DontCare",
];

#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub class: String,
    pub truncated: f64,
    pub occluded: u8,
    pub alpha: f64,
    /// left, top, right, bottom in pixels.
    pub bbox: [f64; 4],
    /// height, width, length in meters.
    pub dims: [f64; 3],
    /// Bottom-center location in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
    /// Number of whitespace-separated fields on the source line.
    pub field_count: usize,
}

impl KittiLabel {
    pub fn parse_line(line: &str, path: &Path, line_no: usize) -> Result<Self> {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != LABEL_FIELDS && toks.len() != LABEL_FIELDS + 1 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {LABEL_FIELDS} or {} fields, found {}", LABEL_FIELDS + 1, toks.len()),
            ));
        }
        let class = toks[0];
        if !KNOWN_CLASSES.contains(&class) {
            return Err(Error::parse(path, line_no, format!("unknown class {class:?}")));
        }
        let nums = parse_floats(&toks[1..].join(" "), path, line_no)?;
        let occluded = nums[1];
        if occluded.fract() != 0.0 || !(-1.0..=3.0).contains(&occluded) {
            return Err(Error::parse(path, line_no, format!("occlusion level {occluded} is not in 0..=3")));
        }
        Ok(KittiLabel {
            class: class.to_string(),
            truncated: nums[0],
            occluded: occluded.max(0.0) as u8,
            alpha: nums[2],
            bbox: [nums[3], nums[4], nums[5], nums[6]],
            dims: [nums[7], nums[8], nums[9]],
            location: [nums[10], nums[11], nums[12]],
            rotation_y: nums[13],
            score: nums.get(14).copied(),
            field_count: toks.len(),
        })
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.class,
            self.truncated,
            self.occluded,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(score) = self.score {
            let _ = write!(s, " {score}");
        }
        s
    }

    /// Sensor-frame 3D box through the calibration chain.
    pub fn box3d(&self, calib: &Calibration) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        let center_rect = Vec3::new(self.location[0], self.location[1] - 0.5 * h, self.location[2]);
        let center = calib.rect_to_velo(&center_rect)?;
        let heading_rect = Vec3::new(self.rotation_y.cos(), 0.0, -self.rotation_y.sin());
        let heading = calib.rect_dir_to_velo(&heading_rect)?;
        Box3D::new(center, h, w, l, heading.y.atan2(heading.x))
    }

    pub fn box2d(&self) -> Result<Box2D> {
        let [l, t, r, b] = self.bbox;
        Box2D::new(l, t, r, b, self.score.unwrap_or(1.0).clamp(0.0, 1.0))
    }

    /// Car label for a sensor-frame box.
    pub fn from_box(b: &Box3D, bbox: &Box2D, truncated: f64, occluded: u8, calib: &Calibration, score: Option<f64>) -> Self {
        let center_rect = calib.velo_to_rect(&b.center);
        let location = [center_rect.x, center_rect.y + 0.5 * b.height, center_rect.z];
        let (fwd, _) = b.axes();
        let d = calib.velo_dir_to_rect(&fwd);
        let rotation_y = (-d.z).atan2(d.x);
        KittiLabel {
            class: "Car".into(),
            truncated,
            occluded,
            alpha: wrap_angle(rotation_y - location[0].atan2(location[2])),
            bbox: [bbox.left, bbox.top, bbox.right, bbox.bottom],
            dims: [b.height, b.width, b.length],
            location,
            rotation_y,
            score,
            field_count: if score.is_some() { LABEL_FIELDS + 1 } else { LABEL_FIELDS },
        }
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<KittiLabel>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| KittiLabel::parse_line(l, path, i + 1))
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<KittiLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn write_labels(path: &Path, labels: &[KittiLabel]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Matrix3x4};

    const SAMPLE: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_fifteen_fields() {
        let l = KittiLabel::parse_line(SAMPLE, Path::new("000000.txt"), 1).unwrap();
        assert_eq!(l.field_count, 15);
        assert_eq!(l.class, "Car");
        assert_eq!(l.dims, [1.65, 1.67, 3.64]);
        assert_eq!(l.location, [-0.65, 1.71, 46.70]);
        assert_eq!(l.score, None);
        let scored = format!("{SAMPLE} 0.87");
        assert_eq!(KittiLabel::parse_line(&scored, Path::new("x"), 1).unwrap().score, Some(0.87));
    }

    #[test]
    fn rejects_bad_lines_with_location() {
        let p = Path::new("label.txt");
        let text = format!("{SAMPLE}\nCar 0 0 0 1 2 3\n");
        match parse_labels(&text, p) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, p);
            }
            other => panic!("{other:?}"),
        }
        assert!(KittiLabel::parse_line(&SAMPLE.replace("Car", "Spaceship"), p, 1).is_err());
        assert!(KittiLabel::parse_line(&SAMPLE.replace("46.70", "inf"), p, 1).is_err());
        assert!(KittiLabel::parse_line(&SAMPLE.replace("46.70", "46,70"), p, 1).is_err());
    }

    #[test]
    fn identity_chain_shifts_by_half_height() {
        let calib = Calibration {
            p2: Matrix3x4::identity(),
            r0_rect: Matrix3::identity(),
            velo_to_cam: Matrix3x4::identity(),
            width: 100,
            height: 100,
        };
        let l = KittiLabel::parse_line(SAMPLE, Path::new("x"), 1).unwrap();
        let b = l.box3d(&calib).unwrap();
        assert!((b.center - Vec3::new(-0.65, 1.71 - 0.825, 46.70)).norm() < 1e-12);
    }

    #[test]
    fn box_label_round_trip() {
        let calib = Calibration::synthetic(240.0, 192.0, 40.0, 384, 128);
        let b = Box3D::new(Vec3::new(12.0, -3.0, -0.98), 1.5, 1.7, 4.1, 0.7).unwrap();
        let bb = Box2D::new(10.0, 20.0, 60.0, 50.0, 1.0).unwrap();
        let label = KittiLabel::from_box(&b, &bb, 0.1, 1, &calib, None);
        let line = label.to_line();
        let back = KittiLabel::parse_line(&line, Path::new("x"), 1).unwrap();
        assert_eq!(back, label);
        let b2 = back.box3d(&calib).unwrap();
        assert!((b2.center - b.center).norm() < 1e-12);
        assert!((b2.yaw - b.yaw).abs() < 1e-12);
        assert_eq!((b2.height, b2.width, b2.length), (b.height, b.width, b.length));
    }
}
