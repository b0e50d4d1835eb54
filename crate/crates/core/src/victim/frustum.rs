use serde::{Deserialize, Serialize};

use super::Box2D;
use crate::lidar::PointCloud;
use crate::raster::{project, CameraModel};
use crate::Vec3;

/// Points of a cloud that project into one 2D box, re-centered on their
/// centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct Frustum {
    pub proposal: Box2D,
    pub indices: Vec<usize>,
    pub points: Vec<Vec3>,
    pub centroid: Vec3,
}

impl Frustum {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Member point `i` in the cloud frame.
    pub fn absolute(&self, i: usize) -> Vec3 {
        self.points[i] + self.centroid
    }
}

/// Where each cloud point lands in the image; `None` for points at or
/// behind the camera plane.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Projected(pub Vec<Option<(f64, f64)>>);

pub fn project_cloud(cloud: &PointCloud, cam: &CameraModel) -> Projected {
    Projected(cloud.points.iter().map(|p| project(cam, p).ok().map(|(u, v, _)| (u, v))).collect())
}

pub fn extract_frustum(cloud: &PointCloud, box2d: &Box2D, cam: &CameraModel) -> Frustum {
    extract_frustum_projected(cloud, &project_cloud(cloud, cam), box2d)
}

/// As [`extract_frustum`] with projections computed once per cloud.
pub fn extract_frustum_projected(cloud: &PointCloud, projected: &Projected, box2d: &Box2D) -> Frustum {
    let mut indices = Vec::new();
    if box2d.area() > 0.0 {
        for (i, uv) in projected.0.iter().enumerate() {
            if let Some((u, v)) = uv {
                if box2d.contains(*u, *v) {
                    indices.push(i);
                }
            }
        }
    }
    let abs: Vec<Vec3> = indices.iter().map(|&i| cloud.points[i]).collect();
    let centroid = if abs.is_empty() {
        Vec3::zeros()
    } else {
        abs.iter().sum::<Vec3>() / abs.len() as f64
    };
    Frustum {
        proposal: *box2d,
        indices,
        points: abs.iter().map(|p| p - centroid).collect(),
        centroid,
    }
}
