//! Simulated spinning LiDAR.
//!
//! Rays are laid out on an (elevation, azimuth) lattice, ray id
//! `e * azimuth_count + a`. Each ray keeps its nearest Möller–Trumbore hit;
//! range noise is drawn from a counter-based stream keyed by ray id, so the
//! draw for a ray never depends on which other rays were traced.
//!
//! [`render_lidar`] only traces rays that fall inside the angular window of a
//! face group's bounding sphere. [`render_lidar_brute_force`] traces every
//! ray against every face and is the reference the culled path must match.

mod velodyne;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::TriMesh;
use crate::{Error, Result, Vec3};

pub use velodyne::{read_velodyne, velodyne_from_bytes, velodyne_to_bytes, write_velodyne};

/// Minimum accepted ray parameter, meters.
pub const T_MIN: f64 = 1e-6;
/// Determinant magnitude below which a ray counts as parallel to a triangle.
pub const DET_EPS: f64 = 1e-12;
/// Reflectance written for rendered points.
pub const RENDERED_REFLECTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    /// Beam elevations in radians, strictly increasing.
    pub elevations: Vec<f64>,
    pub azimuth_step: f64,
    pub azimuth_start: f64,
    pub azimuth_end: f64,
    pub origin: [f64; 3],
    pub noise_std: f64,
    pub max_range: f64,
    pub seed: u64,
}

impl Default for LidarConfig {
    /// 64 beams spread uniformly over [−24.8°, +2.0°], 0.17° azimuth step,
    /// full revolution, 120 m range, 2 cm range noise.
    fn default() -> Self {
        LidarConfig {
            elevations: uniform_elevations(64, -24.8, 2.0),
            azimuth_step: 0.17_f64.to_radians(),
            azimuth_start: -std::f64::consts::PI,
            azimuth_end: std::f64::consts::PI,
            origin: [0.0; 3],
            noise_std: 0.02,
            max_range: 120.0,
            seed: 0,
        }
    }
}

/// `count` elevations evenly spaced between two angles given in degrees.
pub fn uniform_elevations(count: usize, lo_deg: f64, hi_deg: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lo_deg.to_radians()];
    }
    (0..count)
        .map(|i| (lo_deg + (hi_deg - lo_deg) * i as f64 / (count - 1) as f64).to_radians())
        .collect()
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_step > 0.0) {
            return Err(Error::invalid("azimuth step must be positive"));
        }
        if !(self.azimuth_end > self.azimuth_start) {
            return Err(Error::invalid("azimuth range is empty"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::invalid("max range must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise std must be non-negative"));
        }
        if self.elevations.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("elevations must be strictly increasing"));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    /// `⌈(end − start) / step⌉`, tolerant of round-off at exact multiples.
    pub fn azimuth_count(&self) -> usize {
        let ratio = (self.azimuth_end - self.azimuth_start) / self.azimuth_step;
        let nearest = ratio.round();
        if (ratio - nearest).abs() < 1e-9 {
            nearest as usize
        } else {
            ratio.ceil() as usize
        }
    }

    pub fn ray_count(&self) -> usize {
        self.elevations.len() * self.azimuth_count()
    }

    pub fn azimuth(&self, a: usize) -> f64 {
        self.azimuth_start + a as f64 * self.azimuth_step
    }

    pub fn ray(&self, id: usize) -> Ray {
        let n_az = self.azimuth_count();
        Ray {
            origin: self.origin(),
            direction: spherical_direction(self.elevations[id / n_az], self.azimuth(id % n_az)),
        }
    }

    /// Range noise for one ray, independent of every other ray.
    pub fn noise(&self, ray_id: usize) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ray_id as u64);
        let z: f64 = StandardNormal.sample(&mut rng);
        self.noise_std * z
    }

    /// Copy with a different noise seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        LidarConfig { seed, ..self.clone() }
    }
}

/// Unit direction from elevation (above the xy plane) and azimuth (from +x
/// towards +y), z up.
pub fn spherical_direction(elevation: f64, azimuth: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

/// Every lattice ray, elevation-major.
pub fn generate_rays(cfg: &LidarConfig) -> Vec<Ray> {
    (0..cfg.ray_count()).map(|id| cfg.ray(id)).collect()
}

/// Ray/triangle intersection. Returns `(t, u, v)` with the hit point
/// `(1 − u − v)·v0 + u·v1 + v·v2`; boundary hits count, `t` must exceed
/// [`T_MIN`].
pub fn moller_trumbore(ray: &Ray, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < DET_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - v0;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.direction.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > T_MIN).then_some((t, u, v))
}

/// Ray/plane intersection against the triangle's supporting plane without
/// the inside test. Used to re-evaluate a frozen ray→face assignment.
pub fn plane_hit(ray: &Ray, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < DET_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - v0;
    let q = s.cross(&e1);
    Some((e2.dot(&q) * inv, s.dot(&p) * inv, ray.direction.dot(&q) * inv))
}

/// A point cloud in meters with per-point reflectance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub reflectance: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, reflectance: Vec<f64>) -> Result<Self> {
        if points.len() != reflectance.len() {
            return Err(Error::invalid("points and reflectance lengths differ"));
        }
        Ok(PointCloud { points, reflectance })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRecord {
    pub ray_id: usize,
    pub face: usize,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// Noiseless hit point.
    pub point: Vec3,
    pub ray: Ray,
}

impl HitRecord {
    pub fn w(&self) -> f64 {
        1.0 - self.u - self.v
    }
}

fn nearest_hit(ray: &Ray, mesh: &TriMesh, faces: impl Iterator<Item = usize>, max_range: f64) -> Option<(usize, f64, f64, f64)> {
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for fi in faces {
        let [a, b, c] = mesh.faces[fi];
        if let Some((t, u, v)) = moller_trumbore(ray, &mesh.vertices[a], &mesh.vertices[b], &mesh.vertices[c]) {
            if t <= max_range && best.is_none_or(|(_, bt, _, _)| t < bt) {
                best = Some((fi, t, u, v));
            }
        }
    }
    best
}

fn finish(cfg: &LidarConfig, traced: Vec<(usize, Ray, Option<(usize, f64, f64, f64)>)>) -> (PointCloud, Vec<HitRecord>) {
    let mut cloud = PointCloud::default();
    let mut hits = Vec::new();
    for (ray_id, ray, hit) in traced {
        if let Some((face, t, u, v)) = hit {
            let point = ray.at(t);
            cloud.points.push(ray.at(t + cfg.noise(ray_id)));
            cloud.reflectance.push(RENDERED_REFLECTANCE);
            hits.push(HitRecord {
                ray_id,
                face,
                t,
                u,
                v,
                point,
                ray,
            });
        }
    }
    (cloud, hits)
}

/// Reference renderer: every ray against every face.
pub fn render_lidar_brute_force(mesh: &TriMesh, cfg: &LidarConfig) -> (PointCloud, Vec<HitRecord>) {
    let traced: Vec<_> = (0..cfg.ray_count())
        .into_par_iter()
        .map(|id| {
            let ray = cfg.ray(id);
            (id, ray, nearest_hit(&ray, mesh, 0..mesh.face_count(), cfg.max_range))
        })
        .collect();
    finish(cfg, traced)
}

/// Renders the whole mesh as a single culling group.
pub fn render_lidar(mesh: &TriMesh, cfg: &LidarConfig) -> (PointCloud, Vec<HitRecord>) {
    render_lidar_grouped(mesh, &[0..mesh.face_count()], cfg)
}

struct Sphere {
    center: Vec3,
    radius: f64,
}

fn bounding_sphere(mesh: &TriMesh, faces: &Range<usize>) -> Option<Sphere> {
    let verts: Vec<Vec3> = mesh.faces[faces.clone()]
        .iter()
        .flat_map(|f| f.iter().map(|&i| mesh.vertices[i]))
        .collect();
    let (lo, hi) = crate::geometry::aabb_of(&verts)?;
    let center = (lo + hi) * 0.5;
    let radius = verts.iter().map(|v| (v - center).norm()).fold(0.0, f64::max);
    Some(Sphere {
        center,
        radius: radius * (1.0 + 1e-9) + 1e-9,
    })
}

fn ray_may_hit_sphere(ray: &Ray, s: &Sphere, max_range: f64) -> bool {
    let rel = s.center - ray.origin;
    let tc = rel.dot(&ray.direction);
    let d2 = rel.norm_squared() - tc * tc;
    d2 <= s.radius * s.radius && tc + s.radius > 0.0 && tc - s.radius <= max_range
}

/// Lattice rays whose direction lies within the sphere's angular radius.
fn candidate_rays(cfg: &LidarConfig, s: &Sphere) -> Vec<usize> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let n_az = cfg.azimuth_count();
    let rel = s.center - cfg.origin();
    let dist = rel.norm();
    if dist <= s.radius {
        return (0..cfg.ray_count()).collect();
    }
    let alpha = (s.radius / dist).asin();
    let theta_c = (rel.z / dist).asin();
    let phi_c = rel.y.atan2(rel.x);
    let slack = 1e-9;
    let full_circle = theta_c.abs() + alpha >= FRAC_PI_2 - slack;
    let half_width = if full_circle {
        PI
    } else {
        (alpha.sin() / theta_c.cos()).min(1.0).asin() + slack
    };
    let mut az: Vec<usize> = Vec::new();
    if full_circle {
        az.extend(0..n_az);
    } else {
        for k in [-2.0, 0.0, 2.0] {
            let lo = phi_c + k * PI - half_width - cfg.azimuth_start;
            let hi = phi_c + k * PI + half_width - cfg.azimuth_start;
            let a_lo = ((lo / cfg.azimuth_step).floor() as i64 - 1).max(0);
            let a_hi = ((hi / cfg.azimuth_step).ceil() as i64 + 1).min(n_az as i64 - 1);
            if a_lo <= a_hi {
                az.extend(a_lo as usize..=a_hi as usize);
            }
        }
        az.sort_unstable();
        az.dedup();
    }
    let mut out = Vec::new();
    for (e, &elev) in cfg.elevations.iter().enumerate() {
        if (elev - theta_c).abs() > alpha + slack {
            continue;
        }
        out.extend(az.iter().map(|&a| e * n_az + a));
    }
    out
}

/// Nearest-hit rendering with per-group bounding-sphere culling.
///
/// `groups` are disjoint face ranges (typically one per placed object).
/// Produces exactly the hit set of [`render_lidar_brute_force`].
pub fn render_lidar_grouped(mesh: &TriMesh, groups: &[Range<usize>], cfg: &LidarConfig) -> (PointCloud, Vec<HitRecord>) {
    let mut groups: Vec<Range<usize>> = groups.iter().filter(|g| !g.is_empty()).cloned().collect();
    groups.sort_by_key(|g| g.start);
    let spheres: Vec<Sphere> = groups.iter().filter_map(|g| bounding_sphere(mesh, g)).collect();

    let mut candidates: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, s) in spheres.iter().enumerate() {
        for id in candidate_rays(cfg, s) {
            if ray_may_hit_sphere(&cfg.ray(id), s, cfg.max_range) {
                candidates.entry(id).or_default().push(gi);
            }
        }
    }
    let work: Vec<(usize, Vec<usize>)> = candidates.into_iter().collect();
    let traced: Vec<_> = work
        .into_par_iter()
        .map(|(id, gs)| {
            let ray = cfg.ray(id);
            let faces = gs.iter().flat_map(|&g| groups[g].clone());
            (id, ray, nearest_hit(&ray, mesh, faces, cfg.max_range))
        })
        .collect();
    finish(cfg, traced)
}

/// Vertex-position gradients from per-point gradients, holding every ray's
/// face assignment fixed.
///
/// For a hit with barycentrics `(w, u, v)` on face normal `n`,
/// `∂t/∂v_k = b_k · n / (n·d)` and the point moves along `d`.
pub fn lidar_backward(hits: &[HitRecord], point_grads: &[Vec3], mesh: &TriMesh) -> Result<Vec<Vec3>> {
    if hits.len() != point_grads.len() {
        return Err(Error::invalid(format!(
            "{} point gradients for {} hits",
            point_grads.len(),
            hits.len()
        )));
    }
    let mut grads = vec![Vec3::zeros(); mesh.vertex_count()];
    for (h, g) in hits.iter().zip(point_grads) {
        let [a, b, c] = *mesh
            .faces
            .get(h.face)
            .ok_or_else(|| Error::invalid(format!("stale hit record: face {} of {}", h.face, mesh.face_count())))?;
        let d = h.ray.direction;
        let n = (mesh.vertices[b] - mesh.vertices[a]).cross(&(mesh.vertices[c] - mesh.vertices[a]));
        let nd = n.dot(&d);
        if nd.abs() < DET_EPS {
            continue;
        }
        let dl_dt = g.dot(&d);
        let common = n * (dl_dt / nd);
        grads[a] += h.w() * common;
        grads[b] += h.u * common;
        grads[c] += h.v * common;
    }
    Ok(grads)
}

/// Concatenates `rendered` after `scene`; original points are kept.
pub fn merge_into_scene(scene: &PointCloud, rendered: &PointCloud) -> PointCloud {
    let mut out = scene.clone();
    out.points.extend_from_slice(&rendered.points);
    out.reflectance.extend_from_slice(&rendered.reflectance);
    out
}

/// Drops scene points whose line of sight from `origin` passes through the
/// mesh before reaching them.
pub fn cull_occluded(scene: &PointCloud, mesh: &TriMesh, origin: Vec3) -> PointCloud {
    let Some(sphere) = bounding_sphere(mesh, &(0..mesh.face_count())) else {
        return scene.clone();
    };
    let mut out = PointCloud::default();
    for (p, r) in scene.points.iter().zip(&scene.reflectance) {
        let to = p - origin;
        let range = to.norm();
        let mut keep = true;
        if range > 0.0 {
            let ray = Ray {
                origin,
                direction: to / range,
            };
            if ray_may_hit_sphere(&ray, &sphere, range) {
                if let Some((_, t, _, _)) = nearest_hit(&ray, mesh, 0..mesh.face_count(), range) {
                    keep = t >= range - 1e-6;
                }
            }
        }
        if keep {
            out.points.push(*p);
            out.reflectance.push(*r);
        }
    }
    out
}
