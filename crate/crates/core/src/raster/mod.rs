//! Pinhole projection and z-buffered rasterization of vertex-colored meshes.
//!
//! Sampling is at pixel centers with perspective-correct barycentrics. There
//! is no anti-aliasing or shading; only color gradients are exposed.

use std::path::Path;

use nalgebra::{Matrix3x4, Vector4};

use crate::geometry::TriMesh;
use crate::{Error, Result, Vec3};

/// Vertices closer than this to the image plane reject their face.
pub const NEAR_DEPTH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    /// 3×4 projection onto homogeneous pixel coordinates.
    pub projection: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(projection: Matrix3x4<f64>, width: usize, height: usize) -> Self {
        CameraModel {
            projection,
            width,
            height,
        }
    }

    /// `K [I | 0]` with square pixels.
    pub fn pinhole(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            focal, 0.0,   cx,  0.0,
            0.0,   focal, cy,  0.0,
            0.0,   0.0,   1.0, 0.0,
        );
        Self::new(p, width, height)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Pixel coordinates `(u, v)` and depth of a camera-frame point.
pub fn project(cam: &CameraModel, p: &Vec3) -> Result<(f64, f64, f64)> {
    let h = cam.projection * Vector4::new(p.x, p.y, p.z, 1.0);
    let depth = h.z;
    if !(depth > 0.0) {
        return Err(Error::BehindCamera { depth });
    }
    Ok((h.x / depth, h.y / depth, depth))
}

/// Linear RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = self.index(x, y);
        self.data[i] = c;
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0))
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (px, c) in buf.pixels_mut().zip(&self.data) {
            *px = image::Rgb(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0.map(|b| b as f64 / 255.0)).collect(),
        })
    }
}

/// One covered pixel: winning face, its vertex indices, perspective-correct
/// barycentric weights, depth, and which channels were clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub pixel: usize,
    pub face: usize,
    pub vertices: [usize; 3],
    pub weights: [f64; 3],
    pub depth: f64,
    pub clamped: [bool; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoverageMap {
    /// Sorted by pixel index, one entry per covered pixel.
    pub entries: Vec<Coverage>,
}

impl CoverageMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffered rasterization of a camera-frame mesh over `background`.
///
/// Faces with any vertex in front of [`NEAR_DEPTH`] are skipped; the nearest
/// covering face wins each pixel, ties going to the lower face index.
pub fn rasterize(mesh: &TriMesh, cam: &CameraModel, background: &RgbImage) -> (RgbImage, CoverageMap) {
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut winner: Vec<Option<(usize, [f64; 3])>> = vec![None; w * h];

    for (fi, f) in mesh.faces.iter().enumerate() {
        let mut proj = [(0.0, 0.0); 3];
        let mut depth = [0.0; 3];
        let mut ok = true;
        for k in 0..3 {
            match project(cam, &mesh.vertices[f[k]]) {
                Ok((u, v, z)) if z > NEAR_DEPTH => {
                    proj[k] = (u, v);
                    depth[k] = z;
                }
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let area = edge(proj[0], proj[1], proj[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let xs = [proj[0].0, proj[1].0, proj[2].0];
        let ys = [proj[0].1, proj[1].1, proj[2].1];
        let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor()).min(w as f64 - 1.0);
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let y1 = ((max_y - 0.5).floor()).min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let l0 = edge(proj[1], proj[2], p) / area;
                let l1 = edge(proj[2], proj[0], p) / area;
                let l2 = edge(proj[0], proj[1], p) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let q = [l0 / depth[0], l1 / depth[1], l2 / depth[2]];
                let s = q[0] + q[1] + q[2];
                let z = 1.0 / s;
                let idx = y * w + x;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    winner[idx] = Some((fi, [q[0] / s, q[1] / s, q[2] / s]));
                }
            }
        }
    }

    let mut image = background.clone();
    let mut coverage = CoverageMap::default();
    for (idx, win) in winner.into_iter().enumerate() {
        let Some((face, weights)) = win else { continue };
        let verts = mesh.faces[face];
        let mut color = [0.0; 3];
        let mut clamped = [false; 3];
        for ch in 0..3 {
            let c: f64 = (0..3).map(|k| weights[k] * mesh.colors[verts[k]][ch]).sum();
            clamped[ch] = !(0.0..=1.0).contains(&c);
            color[ch] = c.clamp(0.0, 1.0);
        }
        image.data[idx] = color;
        coverage.entries.push(Coverage {
            pixel: idx,
            face,
            vertices: verts,
            weights,
            depth: zbuf[idx],
            clamped,
        });
    }
    (image, coverage)
}

/// Adjoint of the color blend: `∂L/∂c_v = Σ_pixels weight_v · ∂L/∂pixel`,
/// skipping channels that were clamped.
pub fn color_backward(coverage: &CoverageMap, image_grad: &[[f64; 3]], vertex_count: usize) -> Result<Vec<[f64; 3]>> {
    let mut grads = vec![[0.0; 3]; vertex_count];
    for c in &coverage.entries {
        let g = image_grad
            .get(c.pixel)
            .ok_or_else(|| Error::invalid(format!("image gradient has no pixel {}", c.pixel)))?;
        for k in 0..3 {
            let v = c.vertices[k];
            if v >= vertex_count {
                return Err(Error::invalid(format!("coverage vertex {v} out of range")));
            }
            for ch in 0..3 {
                if !c.clamped[ch] {
                    grads[v][ch] += c.weights[k] * g[ch];
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, ParamBlock};
    use crate::geometry::{make_icosphere, MID_GRAY};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::pinhole(100.0, 32.0, 24.0, 64, 48)
    }

    #[test]
    fn projection_examples() {
        let canonical = CameraModel::new(Matrix3x4::identity(), 10, 10);
        assert_eq!(project(&canonical, &Vec3::new(0.0, 0.0, 5.0)).unwrap(), (0.0, 0.0, 5.0));
        assert!(matches!(project(&canonical, &Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera { .. })));

        let p = Vec3::new(0.4, -0.3, 5.0);
        let (u1, v1, _) = project(&cam(), &p).unwrap();
        let doubled = CameraModel::pinhole(200.0, 32.0, 24.0, 64, 48);
        let (u2, v2, _) = project(&doubled, &p).unwrap();
        assert!(((u2 - 32.0) - 2.0 * (u1 - 32.0)).abs() < 1e-12);
        assert!(((v2 - 24.0) - 2.0 * (v1 - 24.0)).abs() < 1e-12);
    }

    #[test]
    fn kitti_p2_matches_homogeneous_multiply() {
        #[rustfmt::skip]
        let p2 = Matrix3x4::new(
            721.5377, 0.0, 609.5593, 44.85728,
            0.0, 721.5377, 172.854, 0.2163791,
            0.0, 0.0, 1.0, 0.002745884,
        );
        let c = CameraModel::new(p2, 1242, 375);
        let x = Vec3::new(1.2, 0.8, 14.0);
        let hx = 721.5377 * 1.2 + 609.5593 * 14.0 + 44.85728;
        let hy = 721.5377 * 0.8 + 172.854 * 14.0 + 0.2163791;
        let hz = 14.0 + 0.002745884;
        let (u, v, z) = project(&c, &x).unwrap();
        assert!((u - hx / hz).abs() < 1e-9 && (v - hy / hz).abs() < 1e-9 && (z - hz).abs() < 1e-12);
    }

    #[test]
    fn mesh_behind_camera_leaves_background() {
        let bg = RgbImage::filled(64, 48, [0.2, 0.3, 0.4]);
        let m = make_icosphere(1, 1.0).unwrap().map_vertices(|v| v - Vec3::new(0.0, 0.0, 5.0));
        let (img, cov) = rasterize(&m, &cam(), &bg);
        assert_eq!(img, bg);
        assert!(cov.is_empty());
        let (img, cov) = rasterize(&TriMesh::empty(), &cam(), &bg);
        assert_eq!(img, bg);
        assert!(cov.is_empty());
    }

    fn triangle(colors: [[f64; 3]; 3]) -> TriMesh {
        TriMesh::new(
            vec![Vec3::new(-0.3, -0.2, 2.0), Vec3::new(0.3, -0.2, 2.0), Vec3::new(0.0, 0.25, 2.0)],
            vec![[0, 1, 2]],
            colors.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn constant_color_triangle() {
        let red = [1.0, 0.0, 0.0];
        let (img, cov) = rasterize(&triangle([red; 3]), &cam(), &RgbImage::filled(64, 48, [0.0; 3]));
        assert!(cov.len() > 50);
        for c in &cov.entries {
            assert_eq!(img.data[c.pixel], red);
            assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_pixel_blends_equally() {
        let m = triangle([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let (img, cov) = rasterize(&m, &cam(), &RgbImage::filled(64, 48, [0.0; 3]));
        // Projected centroid of a fronto-parallel triangle is the centroid of
        // the projected corners.
        let pts: Vec<(f64, f64, f64)> = m.vertices.iter().map(|v| project(&cam(), v).unwrap()).collect();
        let cx = (pts[0].0 + pts[1].0 + pts[2].0) / 3.0;
        let cy = (pts[0].1 + pts[1].1 + pts[2].1) / 3.0;
        let (x, y) = (cx.floor() as usize, cy.floor() as usize);
        let px = (x as f64 + 0.5, y as f64 + 0.5);
        // Analytic barycentrics at the sampled pixel center.
        let area = edge((pts[0].0, pts[0].1), (pts[1].0, pts[1].1), (pts[2].0, pts[2].1));
        let l0 = edge((pts[1].0, pts[1].1), (pts[2].0, pts[2].1), px) / area;
        let l1 = edge((pts[2].0, pts[2].1), (pts[0].0, pts[0].1), px) / area;
        let l2 = 1.0 - l0 - l1;
        let c = img.get(x, y);
        assert!((c[0] - l0).abs() < 1e-9 && (c[1] - l1).abs() < 1e-9 && (c[2] - l2).abs() < 1e-9);
        for ch in c {
            assert!((ch - 1.0 / 3.0).abs() < 0.1);
        }
        assert!(cov.entries.iter().any(|e| e.pixel == img.index(x, y)));
    }

    #[test]
    fn z_buffer_keeps_nearest_face() {
        let verts = vec![
            Vec3::new(-0.5, -0.5, 3.0),
            Vec3::new(0.5, -0.5, 3.0),
            Vec3::new(0.0, 0.5, 3.0),
            Vec3::new(-0.5, -0.4, 2.0),
            Vec3::new(0.5, -0.4, 2.5),
            Vec3::new(0.0, 0.6, 4.0),
        ];
        let m = TriMesh::with_uniform_color(verts, vec![[0, 1, 2], [3, 4, 5]], MID_GRAY).unwrap();
        let (_, cov) = rasterize(&m, &cam(), &RgbImage::filled(64, 48, [0.0; 3]));
        for e in &cov.entries {
            let px = ((e.pixel % 64) as f64 + 0.5, (e.pixel / 64) as f64 + 0.5);
            // Brute force: depth of each face along this pixel's ray.
            let dir = Vec3::new((px.0 - 32.0) / 100.0, (px.1 - 24.0) / 100.0, 1.0);
            let ray = crate::lidar::Ray { origin: Vec3::zeros(), direction: dir };
            let depths: Vec<Option<f64>> = m
                .faces
                .iter()
                .map(|f| crate::lidar::moller_trumbore(&ray, &m.vertices[f[0]], &m.vertices[f[1]], &m.vertices[f[2]]).map(|h| h.0))
                .collect();
            let best = depths
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.map(|d| (i, d)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            if let Some((fi, d)) = best {
                assert_eq!(e.face, fi);
                assert!((e.depth - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn color_backward_definition_cases() {
        let cov = CoverageMap {
            entries: vec![Coverage {
                pixel: 0,
                face: 0,
                vertices: [0, 1, 2],
                weights: [0.2, 0.3, 0.5],
                depth: 1.0,
                clamped: [false; 3],
            }],
        };
        let g = color_backward(&cov, &[[1.0, 0.0, 0.0]], 3).unwrap();
        assert_eq!([g[0][0], g[1][0], g[2][0]], [0.2, 0.3, 0.5]);
        assert!(g.iter().all(|c| c[1] == 0.0 && c[2] == 0.0));
        let z = color_backward(&cov, &[[0.0; 3]], 3).unwrap();
        assert!(z.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = make_icosphere(2, 0.5).unwrap().map_vertices(|v| v + Vec3::new(0.1, 0.0, 3.0));
        for c in &mut m.colors {
            *c = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        }
        let bg = RgbImage::filled(64, 48, [0.5; 3]);
        let weights: Vec<[f64; 3]> = (0..64 * 48)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let functional = |img: &RgbImage| -> f64 {
            img.data.iter().zip(&weights).map(|(p, w)| p[0] * w[0] + p[1] * w[1] + p[2] * w[2]).sum()
        };
        let (_, cov) = rasterize(&m, &cam(), &bg);
        let grads = color_backward(&cov, &weights, m.vertex_count()).unwrap();
        let mut block = ParamBlock::new("colors", m.vertex_count(), 3, m.colors.iter().flatten().copied().collect()).unwrap();
        block.grad = grads.iter().flatten().copied().collect();
        let geom = m.clone();
        let report = finite_diff_check(
            |p| {
                let mut mm = geom.clone();
                mm.colors = p.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                Ok(functional(&rasterize(&mm, &cam(), &bg).0))
            },
            &block,
            1e-5,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.passed(), "max rel {}", report.max_rel_error);
        // Back-facing half of the sphere has no coverage and no gradient.
        let covered: std::collections::BTreeSet<usize> = cov.entries.iter().flat_map(|e| e.vertices).collect();
        for (i, g) in grads.iter().enumerate() {
            if !covered.contains(&i) {
                assert_eq!(*g, [0.0; 3]);
            }
        }
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(5, 4, [0.1, 0.5, 0.9]);
        img.set(2, 3, [1.0, 0.0, 0.25]);
        let q = img.quantized();
        let p = dir.path().join("x.png");
        q.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), q);
    }
}
