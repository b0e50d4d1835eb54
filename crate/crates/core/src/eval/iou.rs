use crate::victim::Box3D;

/// Collinearity tolerance for the clipping half-plane test.
const CLIP_EPS: f64 = 1e-9;

type P2 = [f64; 2];

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: P2, q: P2, a: P2, b: P2) -> P2 {
    let d1 = [q[0] - p[0], q[1] - p[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < f64::MIN_POSITIVE {
        return p;
    }
    let t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom;
    [p[0] + t * d1[0], p[1] + t * d1[1]]
}

/// Sutherland–Hodgman: `subject` clipped by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out: Vec<P2> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    out.push(line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

/// Shoelace area (positive for counter-clockwise order).
pub fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners())).max(0.0)
}

/// Rotated-rectangle IoU in the ground plane.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.length * a.width + b.length * b.width - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// BEV intersection times vertical overlap over the volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bx(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> Box3D {
        Box3D::new(Vec3::new(x, y, 0.0), 1.0, w, l, yaw).unwrap()
    }

    #[test]
    fn basic_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou_bev(&a, &bx(5.0, 0.0, 1.0, 1.0, 0.3)), 0.0);
        assert!((iou_bev(&a, &bx(0.5, 0.0, 1.0, 1.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        let rot = bx(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        // unit square against itself turned 45°: intersection is a regular octagon
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        assert!((iou_bev(&a, &rot) - octagon / (2.0 - octagon)).abs() < 1e-12);
    }

    #[test]
    fn three_d_cases() {
        let a = Box3D::new(Vec3::zeros(), 2.0, 1.0, 1.0, 0.0).unwrap();
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        let up = Box3D::new(Vec3::new(0.0, 0.0, 3.0), 2.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(iou_3d(&a, &up), 0.0);
        let half = Box3D::new(Vec3::new(0.0, 0.0, 1.0), 2.0, 1.0, 1.0, 0.0).unwrap();
        assert!((iou_3d(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetry_and_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let a = bx(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), rng.random_range(-PI..PI));
            let b = bx(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), rng.random_range(-PI..PI));
            assert!((iou_bev(&a, &b) - iou_bev(&b, &a)).abs() < 1e-12);
            let (th, t) = (rng.random_range(-PI..PI), Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0));
            let mv = |x: &Box3D| {
                let c = Vec3::new(th.cos() * x.center.x - th.sin() * x.center.y, th.sin() * x.center.x + th.cos() * x.center.y, 0.0) + t;
                Box3D::new(c, x.height, x.width, x.length, x.yaw + th).unwrap()
            };
            assert!((iou_bev(&a, &b) - iou_bev(&mv(&a), &mv(&b))).abs() < 1e-9);
        }
    }

    #[test]
    fn nested_scaled_box_gives_square_of_scale() {
        for &s in &[0.25, 0.5, 0.8, 1.0] {
            let a = bx(1.0, -2.0, 1.8, 4.2, 0.7);
            let b = bx(1.0, -2.0, 1.8 * s, 4.2 * s, 0.7);
            assert!((iou_bev(&a, &b) - s * s).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_handles_shared_edges() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(1.0, 0.0, 1.0, 1.0, 0.0);
        assert!(iou_bev(&a, &b).abs() < 1e-12);
        let c = bx(0.0, 0.0, 1.0, 1.0, PI / 2.0);
        assert!((iou_bev(&a, &c) - 1.0).abs() < 1e-9);
    }
}
