//! Triangle meshes and the rigid/deformable transforms that place the
//! adversarial object on a car roof.

mod ply;

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::victim::Box3D;
use crate::{Error, Result, Vec3};

pub use ply::{read_ply, write_obj, write_ply, PlyFormat};

/// Default uniform vertex color.
pub const MID_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

/// Triangle mesh with per-vertex RGB colors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let mesh = TriMesh {
            vertices,
            faces,
            colors,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Mesh with every vertex colored `color`.
    pub fn with_uniform_color(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, color: [f64; 3]) -> Result<Self> {
        let colors = vec![color; vertices.len()];
        Self::new(vertices, faces, colors)
    }

    pub fn empty() -> Self {
        TriMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            colors: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "{} colors for {} vertices",
                self.colors.len(),
                self.vertices.len()
            )));
        }
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!("face {fi} indexes past {n} vertices")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if let Some(i) = self
            .vertices
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!("vertex {i}")));
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Undirected edge set, each edge stored once as `(lo, hi)`.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges
    }

    /// Sorted neighbor lists derived from the edge set.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// V − E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Axis-aligned bounds `(min, max)`; `None` for a mesh without vertices.
    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        aabb_of(&self.vertices)
    }

    /// Concatenate meshes, offsetting face indices. Returns the merged mesh
    /// and each input's starting vertex and face offsets.
    pub fn concat(meshes: &[&TriMesh]) -> (TriMesh, Vec<(usize, usize)>) {
        let mut out = TriMesh::empty();
        let mut offsets = Vec::with_capacity(meshes.len());
        for m in meshes {
            let vo = out.vertices.len();
            offsets.push((vo, out.faces.len()));
            out.vertices.extend_from_slice(&m.vertices);
            out.colors.extend_from_slice(&m.colors);
            out.faces
                .extend(m.faces.iter().map(|f| [f[0] + vo, f[1] + vo, f[2] + vo]));
        }
        (out, offsets)
    }

    /// Copy with every vertex mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
            colors: self.colors.clone(),
        }
    }
}

pub(crate) fn aabb_of(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in &points[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Some((lo, hi))
}

/// Rotation about the vertical (z) axis followed by a translation, stored as
/// a homogeneous 4×4 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_yaw_translation(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let matrix = Matrix4::new(
            c,  -s,  0.0, translation.x,
            s,   c,  0.0, translation.y,
            0.0, 0.0, 1.0, translation.z,
            0.0, 0.0, 0.0, 1.0,
        );
        RigidTransform { matrix }
    }

    pub fn translation_only(translation: Vec3) -> Self {
        Self::from_yaw_translation(0.0, translation)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation() * v
    }

    /// Checks orthonormality, unit determinant and the homogeneous last row.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let orth = (r.transpose() * r - Matrix3::identity()).amax() <= tol;
        let det = (r.determinant() - 1.0).abs() <= tol;
        let last = self.matrix.fixed_view::<1, 4>(3, 0).into_owned();
        let last_ok = last[(0, 0)] == 0.0 && last[(0, 1)] == 0.0 && last[(0, 2)] == 0.0 && last[(0, 3)] == 1.0;
        orth && det && last_ok
    }
}

/// Per-vertex offsets added to the base mesh before placement.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement(pub Vec<Vec3>);

impl Displacement {
    pub fn zeros(n: usize) -> Self {
        Displacement(vec![Vec3::zeros(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Flat `[x0, y0, z0, x1, ...]` layout used by parameter blocks.
    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::invalid(format!("flat displacement length {} not divisible by 3", values.len())));
        }
        Ok(Displacement(
            values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        ))
    }
}

/// Regular icosahedron subdivided `subdivisions` times, projected onto the
/// sphere of `radius` and colored mid-gray.
pub fn make_icosphere(subdivisions: u32, radius: f64) -> Result<TriMesh> {
    if subdivisions > 6 {
        return Err(Error::invalid(format!("icosphere subdivisions {subdivisions} > 6")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("icosphere radius must be positive, got {radius}")));
    }

    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }

    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    TriMesh::with_uniform_color(vertices, faces, MID_GRAY)
}

/// `v_i = T · (v_i⁰ + d_i)`; faces and colors are copied from `base`.
pub fn apply_deformation(base: &TriMesh, d: &Displacement, t: &RigidTransform) -> Result<TriMesh> {
    if d.len() != base.vertex_count() {
        return Err(Error::invalid(format!(
            "displacement has {} entries for {} vertices",
            d.len(),
            base.vertex_count()
        )));
    }
    let r = t.rotation();
    let tr = t.translation();
    let vertices = base
        .vertices
        .iter()
        .zip(&d.0)
        .map(|(v, dv)| r * (v + dv) + tr)
        .collect();
    Ok(TriMesh {
        vertices,
        faces: base.faces.clone(),
        colors: base.colors.clone(),
    })
}

/// Adjoint of [`apply_deformation`] with respect to the displacement:
/// rotates world-frame vertex gradients back by `Rᵀ`.
pub fn deformation_backward(vertex_grads: &[Vec3], t: &RigidTransform) -> Vec<Vec3> {
    let rt = t.rotation().transpose();
    vertex_grads.iter().map(|g| rt * g).collect()
}

/// `δ_i = v_i − mean(v_j for j ∈ N(i))`; isolated vertices get zero.
pub fn laplacian_deltas(mesh: &TriMesh) -> Vec<Vec3> {
    let adj = mesh.neighbors();
    mesh.vertices
        .iter()
        .zip(&adj)
        .map(|(v, nbrs)| {
            if nbrs.is_empty() {
                Vec3::zeros()
            } else {
                let centroid = nbrs.iter().fold(Vec3::zeros(), |acc, &j| acc + mesh.vertices[j]) / nbrs.len() as f64;
                v - centroid
            }
        })
        .collect()
}

/// `Σ_i ‖δ_i‖²`.
pub fn laplacian_loss(mesh: &TriMesh) -> f64 {
    laplacian_deltas(mesh).iter().map(|d| d.norm_squared()).sum()
}

/// Loss and its gradient with respect to every vertex position.
pub fn laplacian_loss_grad(mesh: &TriMesh) -> (f64, Vec<Vec3>) {
    let adj = mesh.neighbors();
    let deltas = laplacian_deltas(mesh);
    let loss = deltas.iter().map(|d| d.norm_squared()).sum();
    let mut grad: Vec<Vec3> = deltas.iter().map(|d| 2.0 * d).collect();
    for (i, nbrs) in adj.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let share = deltas[i] * (2.0 / nbrs.len() as f64);
        for &j in nbrs {
            grad[j] -= share;
        }
    }
    (loss, grad)
}

/// Axis-aligned box, centered on the base mesh's bounding-box center, that
/// every deformed vertex must stay inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtentLimits {
    pub size: [f64; 3],
}

impl ExtentLimits {
    pub fn new(size: [f64; 3]) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("extent limits must be positive, got {size:?}")));
        }
        Ok(ExtentLimits { size })
    }

    /// The bounding-box size of `mesh`.
    pub fn of_mesh(mesh: &TriMesh) -> Result<Self> {
        let (lo, hi) = mesh
            .aabb()
            .ok_or_else(|| Error::invalid("cannot take extents of an empty mesh"))?;
        Self::new((hi - lo).into())
    }
}

/// Projects `d` so that every deformed vertex `base + d` lies inside the limit
/// box. Coordinates already inside are returned bit-identical.
pub fn clamp_extents(d: &Displacement, base: &TriMesh, limits: &ExtentLimits) -> Displacement {
    let Some((lo, hi)) = base.aabb() else {
        return d.clone();
    };
    let center = (lo + hi) * 0.5;
    let half = Vec3::from(limits.size) * 0.5;
    let out = base
        .vertices
        .iter()
        .zip(&d.0)
        .map(|(v, dv)| {
            let mut clamped = *dv;
            for k in 0..3 {
                let (min, max) = (center[k] - half[k], center[k] + half[k]);
                let p = v[k] + dv[k];
                if p > max {
                    clamped[k] = max - v[k];
                } else if p < min {
                    clamped[k] = min - v[k];
                }
            }
            clamped
        })
        .collect();
    Displacement(out)
}

/// Largest ratio of deformed extent to limit over the three axes, measured
/// in the mesh frame. A value ≤ 1 means the limits hold.
pub fn extent_ratio(d: &Displacement, base: &TriMesh, limits: &ExtentLimits) -> f64 {
    let deformed: Vec<Vec3> = base.vertices.iter().zip(&d.0).map(|(v, dv)| v + dv).collect();
    match aabb_of(&deformed) {
        Some((lo, hi)) => (0..3)
            .map(|k| (hi[k] - lo[k]) / limits.size[k])
            .fold(0.0, f64::max),
        None => 0.0,
    }
}

/// Places the mesh origin above the roof center of `car`, rotated to the
/// car's yaw. `clearance` is the height of the mesh origin above the roof.
pub fn roof_pose(car: &Box3D, clearance: f64) -> RigidTransform {
    let t = car.center + Vec3::new(0.0, 0.0, 0.5 * car.height + clearance);
    RigidTransform::from_yaw_translation(car.yaw, t)
}
