use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Axis-aligned image box in pixels with an objectness score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
    pub score: f64,
    pub class_id: u32,
}

pub const CAR_CLASS: u32 = 0;

impl Box2D {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64, score: f64) -> Result<Self> {
        let b = Box2D {
            left,
            top,
            right,
            bottom,
            score,
            class_id: CAR_CLASS,
        };
        if !(left < right && top < bottom) {
            return Err(Error::invalid(format!("degenerate 2D box {b:?}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.left && u <= self.right && v >= self.top && v <= self.bottom
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let w = (self.right.min(other.right) - self.left.max(other.left)).max(0.0);
        let h = (self.bottom.min(other.bottom) - self.top.max(other.top)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clipped to `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Box2D> {
        let b = Box2D {
            left: self.left.max(0.0),
            top: self.top.max(0.0),
            right: self.right.min(width),
            bottom: self.bottom.min(height),
            ..*self
        };
        (b.left < b.right && b.top < b.bottom).then_some(b)
    }
}

/// Greedy non-maximum suppression; survivors sorted by descending score.
pub fn nms(mut boxes: Vec<Box2D>, iou_threshold: f64) -> Vec<Box2D> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Box2D> = Vec::new();
    for b in boxes {
        if keep.iter().all(|k| k.iou(&b) < iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

/// Oriented 3D box in the z-up sensor frame. `center` is the volumetric
/// center; `yaw` is the heading of the length axis from +x towards +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub height: f64,
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

impl Box3D {
    pub fn new(center: Vec3, height: f64, width: f64, length: f64, yaw: f64) -> Result<Self> {
        if !(height > 0.0 && width > 0.0 && length > 0.0) {
            return Err(Error::invalid(format!(
                "box dimensions must be positive: h={height} w={width} l={length}"
            )));
        }
        if !(center.iter().all(|c| c.is_finite()) && yaw.is_finite()) {
            return Err(Error::NonFinite("box center or yaw".into()));
        }
        Ok(Box3D {
            center,
            height,
            width,
            length,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn bottom(&self) -> f64 {
        self.center.z - 0.5 * self.height
    }

    pub fn top(&self) -> f64 {
        self.center.z + 0.5 * self.height
    }

    /// Unit heading (length axis) and lateral (width axis) in the ground plane.
    pub fn axes(&self) -> (Vec3, Vec3) {
        let (s, c) = self.yaw.sin_cos();
        (Vec3::new(c, s, 0.0), Vec3::new(-s, c, 0.0))
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (fwd, lat) = self.axes();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        let c = self.center;
        let corner = |a: f64, b: f64| {
            let p = c + fwd * a + lat * b;
            [p.x, p.y]
        };
        [corner(hl, -hw), corner(hl, hw), corner(-hl, hw), corner(-hl, -hw)]
    }

    /// All eight corners, bottom face first.
    pub fn corners(&self) -> [Vec3; 8] {
        let bev = self.bev_corners();
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = Vec3::new(c[0], c[1], self.bottom());
            out[i + 4] = Vec3::new(c[0], c[1], self.top());
        }
        out
    }

    /// Point expressed in box-local coordinates (length, width, height axes).
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let (fwd, lat) = self.axes();
        let d = p - self.center;
        Vec3::new(d.dot(&fwd), d.dot(&lat), d.z)
    }

    /// Inside test with per-axis margins added to every face.
    pub fn contains_with_margin(&self, p: &Vec3, margin_xy: f64, margin_z: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.length + margin_xy
            && l.y.abs() <= 0.5 * self.width + margin_xy
            && l.z.abs() <= 0.5 * self.height + margin_z
    }

    pub fn volume(&self) -> f64 {
        self.height * self.width * self.length
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box2d_validation_and_iou() {
        assert!(Box2D::new(1.0, 0.0, 1.0, 2.0, 0.5).is_err());
        assert!(Box2D::new(0.0, 0.0, 1.0, 2.0, 1.5).is_err());
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0, 0.9).unwrap();
        let b = Box2D::new(1.0, 0.0, 3.0, 2.0, 0.8).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert!(a.clipped(1.0, 1.0).unwrap().area() == 1.0);
        assert!(a.clipped(-1.0, 5.0).is_none());
    }

    #[test]
    fn nms_survivors_do_not_overlap() {
        let boxes: Vec<Box2D> = (0..20)
            .map(|i| {
                let x = (i % 5) as f64 * 3.0;
                Box2D::new(x, 0.0, x + 8.0, 8.0, 0.5 + 0.02 * i as f64).unwrap()
            })
            .collect();
        let kept = nms(boxes, 0.5);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                assert!(kept[i].iou(&kept[j]) < 0.5);
            }
        }
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn box3d_geometry() {
        let b = Box3D::new(Vec3::new(1.0, 2.0, 0.0), 1.5, 2.0, 4.0, 3.0 * PI).unwrap();
        assert!((b.yaw - PI).abs() < 1e-12);
        assert!(Box3D::new(Vec3::zeros(), 0.0, 1.0, 1.0, 0.0).is_err());
        let c = b.bev_corners();
        let xs: Vec<f64> = c.iter().map(|p| p[0]).collect();
        assert!((xs.iter().cloned().fold(f64::MIN, f64::max) - 3.0).abs() < 1e-12);
        assert!(b.contains_with_margin(&Vec3::new(2.9, 2.9, 0.7), 0.0, 0.0));
        assert!(!b.contains_with_margin(&Vec3::new(3.1, 2.0, 0.0), 0.0, 0.0));
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(2.5 * PI) - 0.5 * PI).abs() < 1e-12);
    }
}
