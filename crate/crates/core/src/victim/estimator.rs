use super::{Box3D, Frustum};
use crate::Vec3;

/// Fewer car points than this yield no detection.
pub const MIN_BOX_POINTS: usize = 8;
const MIN_EXTENT: f64 = 1e-3;
/// Share of points ignored at each end of every axis by [`estimate_box`].
pub const BOX_TRIM: f64 = 0.03;
/// Ground-plane linking distance for [`largest_cluster`].
pub const CLUSTER_RADIUS: f64 = 0.5;

/// Points of the largest group linked by ground-plane distance ≤ `radius`;
/// ties go to the group containing the lowest index.
pub fn largest_cluster(pts: &[Vec3], radius: f64) -> Vec<Vec3> {
    let n = pts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let cell = |p: &Vec3| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> = std::collections::HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    for (i, p) in pts.iter().enumerate() {
        let (cx, cy) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(members) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &j in members {
                    if j > i && (p.xy() - pts[j].xy()).norm_squared() <= r2 {
                        let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; n];
    let roots: Vec<usize> = (0..n).map(|i| root(&mut parent, i)).collect();
    for &r in &roots {
        size[r] += 1;
    }
    let Some(best) = (0..n).max_by(|&a, &b| size[a].cmp(&size[b]).then(b.cmp(&a))) else {
        return Vec::new();
    };
    pts.iter().zip(&roots).filter(|(_, &r)| r == best).map(|(p, _)| *p).collect()
}

/// Geometric box fit on the largest cluster of masked points: ground-plane
/// principal axis for yaw, trimmed projections for extents and center.
pub fn estimate_box(frustum: &Frustum, car_mask: &[bool]) -> Option<Box3D> {
    estimate_box_with_support(frustum, car_mask).map(|(b, _)| b)
}

/// As [`estimate_box`], also returning the number of points in the fitted
/// cluster.
pub fn estimate_box_with_support(frustum: &Frustum, car_mask: &[bool]) -> Option<(Box3D, usize)> {
    let pts: Vec<Vec3> = frustum
        .points
        .iter()
        .zip(car_mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    let cluster = largest_cluster(&pts, CLUSTER_RADIUS);
    fit_box_trimmed(&cluster, BOX_TRIM).map(|mut b| {
        b.center += frustum.centroid;
        (b, cluster.len())
    })
}

/// Untrimmed fit: extents span every point.
pub fn fit_box(pts: &[Vec3]) -> Option<Box3D> {
    fit_box_trimmed(pts, 0.0)
}

/// Fit whose extents run between the `trim` and `1 − trim` quantiles of the
/// projections on each axis; `None` below [`MIN_BOX_POINTS`].
pub fn fit_box_trimmed(pts: &[Vec3], trim: f64) -> Option<Box3D> {
    if pts.len() < MIN_BOX_POINTS || !(0.0..0.5).contains(&trim) {
        return None;
    }
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vec3>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p.x - mean.x, p.y - mean.y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let yaw = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = yaw.sin_cos();
    let mut axes: [Vec<f64>; 3] = [Vec::with_capacity(pts.len()), Vec::with_capacity(pts.len()), Vec::with_capacity(pts.len())];
    for p in pts {
        let (dx, dy) = (p.x - mean.x, p.y - mean.y);
        let local = [c * dx + s * dy, -s * dx + c * dy, p.z];
        for k in 0..3 {
            axes[k].push(local[k]);
        }
    }
    let last = pts.len() - 1;
    let (i_lo, i_hi) = ((trim * last as f64).floor() as usize, ((1.0 - trim) * last as f64).ceil() as usize);
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for k in 0..3 {
        axes[k].sort_by(f64::total_cmp);
        lo[k] = axes[k][i_lo];
        hi[k] = axes[k][i_hi];
    }
    let mid = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let center = Vec3::new(
        mean.x + c * mid[0] - s * mid[1],
        mean.y + s * mid[0] + c * mid[1],
        mid[2],
    );
    let ext: [f64; 3] = [0, 1, 2].map(|k| (hi[k] - lo[k]).max(MIN_EXTENT));
    Box3D::new(center, ext[2], ext[1], ext[0], yaw).ok()
}
