//! Attack objectives and the two-phase universal optimizer: the mesh shape
//! is trained against the point-cloud segmentation first, then its vertex
//! colors against the image objectness scorer.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{merge_placements, place_meshes, scene_hash, Scene};
use crate::diffcore::{adam_step, reduce_ordered, AdamConfig, AdamState, Checkpoint, CheckpointBlock, ParamBlock};
use crate::eval::iou_bev;
use crate::geometry::{
    apply_deformation, clamp_extents, deformation_backward, extent_ratio, laplacian_loss_grad, make_icosphere, write_ply,
    Displacement, ExtentLimits, PlyFormat, RigidTransform, TriMesh,
};
use crate::lidar::{lidar_backward, merge_into_scene, render_lidar_grouped, HitRecord, LidarConfig, PointCloud};
use crate::raster::{color_backward, rasterize, RgbImage};
use crate::victim::{
    car_mask, car_probability, estimate_box, extract_frustum_projected, project_cloud, Anchor, FrustumSource, IntegralImage,
    Victim,
};
use crate::{Error, Result, Vec3};

/// Upper clamp on a car probability before `−log(1 − p)`.
pub const P_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Shape,
    Texture,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Shape => "shape",
            Phase::Texture => "texture",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Laplacian weight.
    pub lambda: f64,
    pub shape_epochs: usize,
    pub texture_epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub subdivisions: u32,
    pub radius: f64,
    /// Mesh-frame box the deformed mesh must fit in; defaults to the bounding
    /// box of the initial sphere.
    pub extent_limits: Option<[f64; 3]>,
    /// Height of the mesh origin above the roof; defaults to the radius.
    pub clearance: Option<f64>,
    pub lr_shape: f64,
    pub lr_texture: f64,
    /// Frustums used while training the shape.
    pub frustum_source: FrustumSource,
    /// Anchors at or above this score enter the image loss.
    pub objectness_floor: f64,
    /// Minimum 2D IoU between an anchor and a labelled car for the anchor to
    /// enter the image loss.
    pub objectness_iou: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda: 0.1,
            shape_epochs: 8,
            texture_epochs: 8,
            batch_size: 8,
            seed: 5,
            subdivisions: 2,
            radius: 0.4,
            extent_limits: None,
            clearance: None,
            lr_shape: 0.01,
            lr_texture: 0.05,
            frustum_source: FrustumSource::GroundTruth,
            objectness_floor: 0.3,
            objectness_iou: 0.3,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        for (name, lr) in [("lr_shape", self.lr_shape), ("lr_texture", self.lr_texture)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if let Some(c) = self.clearance {
            if !c.is_finite() {
                return Err(Error::invalid("clearance must be finite"));
            }
        }
        if let Some(l) = self.extent_limits {
            ExtentLimits::new(l)?;
        }
        Ok(())
    }

    pub fn clearance(&self) -> f64 {
        self.clearance.unwrap_or(self.radius)
    }
}

/// Maximum car probability among points whose argmax is car, with the index
/// of that point. Ties count as car; the first maximum wins.
pub fn car_prob_argmax(logits: &[[f64; 2]]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, l) in logits.iter().enumerate() {
        if l[1] >= l[0] {
            let p = car_probability(l);
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
    }
    best
}

pub fn car_prob(logits: &[[f64; 2]]) -> Option<f64> {
    car_prob_argmax(logits).map(|(_, p)| p)
}

/// `−log(1 − p)·iou` with `p` clamped.
pub fn mesh_term(p: f64, iou: f64) -> f64 {
    -(1.0 - p.min(P_CLAMP)).ln() * iou
}

/// Derivative of [`mesh_term`] with respect to `p`.
pub fn mesh_term_grad(p: f64, iou: f64) -> f64 {
    if p > P_CLAMP {
        0.0
    } else {
        iou / (1.0 - p)
    }
}

/// `Σ_k −log(1 − p_k)·IoU_k`; absent probabilities contribute nothing.
pub fn l_mesh(terms: &[(Option<f64>, f64)]) -> f64 {
    terms.iter().filter_map(|(p, iou)| p.map(|p| mesh_term(p, *iou))).sum()
}

/// The learnable mesh: a fixed base sphere, one shared displacement block
/// and one shared color block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackParams {
    pub base: TriMesh,
    /// `n × 3` vertex offsets in the mesh frame.
    pub displacement: ParamBlock,
    /// `n × 3` vertex colors, bounded to `[0, 1]`.
    pub colors: ParamBlock,
    pub limits: ExtentLimits,
    pub shape_trained: bool,
    pub texture_trained: bool,
}

impl AttackParams {
    /// Undeformed mid-gray sphere.
    pub fn new(cfg: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let base = make_icosphere(cfg.subdivisions, cfg.radius)?;
        let limits = match cfg.extent_limits {
            Some(l) => ExtentLimits::new(l)?,
            None => ExtentLimits::of_mesh(&base)?,
        };
        let n = base.vertex_count();
        let colors = ParamBlock::new("mesh.colors", n, 3, base.colors.iter().flatten().copied().collect())?
            .with_uniform_bounds(0.0, 1.0);
        Ok(AttackParams {
            displacement: ParamBlock::zeros("mesh.displacement", n, 3),
            colors,
            base,
            limits,
            shape_trained: false,
            texture_trained: false,
        })
    }

    pub fn displacement(&self) -> Displacement {
        Displacement::from_flat(&self.displacement.values).expect("block shape is n x 3")
    }

    pub fn color_values(&self) -> Vec<[f64; 3]> {
        self.colors.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Base mesh carrying the current colors (undeformed).
    pub fn textured_base(&self) -> TriMesh {
        TriMesh {
            colors: self.color_values(),
            ..self.base.clone()
        }
    }

    /// Deformed, colored mesh in its own frame.
    pub fn mesh(&self) -> TriMesh {
        apply_deformation(&self.textured_base(), &self.displacement(), &RigidTransform::identity())
            .expect("displacement matches the base")
    }

    pub fn extent_ratio(&self) -> f64 {
        extent_ratio(&self.displacement(), &self.base, &self.limits)
    }

    pub fn to_checkpoint(&self, cfg: &AttackConfig) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "mesh",
            "subdivisions": cfg.subdivisions,
            "radius": cfg.radius,
            "limits": self.limits,
            "shape_trained": self.shape_trained,
            "texture_trained": self.texture_trained,
        });
        let mut ck = Checkpoint::new(meta);
        ck.push(CheckpointBlock::from_param(&self.displacement));
        ck.push(CheckpointBlock::from_param(&self.colors));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("mesh") {
            return Err(Error::invalid("checkpoint does not hold an attack mesh"));
        }
        let subdivisions = ck.meta["subdivisions"]
            .as_u64()
            .ok_or_else(|| Error::invalid("mesh checkpoint lacks subdivisions"))? as u32;
        let radius = ck.meta["radius"]
            .as_f64()
            .ok_or_else(|| Error::invalid("mesh checkpoint lacks radius"))?;
        let limits: ExtentLimits = serde_json::from_value(ck.meta["limits"].clone())?;
        let cfg = AttackConfig {
            subdivisions,
            radius,
            extent_limits: Some(limits.size),
            ..AttackConfig::default()
        };
        let mut p = AttackParams::new(&cfg)?;
        for block in [&mut p.displacement, &mut p.colors] {
            let src = ck.block(&block.name)?;
            if src.rows != block.rows || src.cols != block.cols {
                return Err(Error::invalid(format!("checkpoint block {} has the wrong shape", block.name)));
            }
            block.values = src.values.clone();
        }
        if !p.colors.within_bounds() {
            return Err(Error::invalid("checkpoint colors leave [0, 1]"));
        }
        p.shape_trained = ck.meta["shape_trained"].as_bool().unwrap_or(false);
        p.texture_trained = ck.meta["texture_trained"].as_bool().unwrap_or(false);
        Ok(p)
    }

    pub fn save(&self, cfg: &AttackConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(cfg).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn export_ply(&self, path: &Path) -> Result<()> {
        write_ply(&self.mesh(), path, PlyFormat::BinaryLittleEndian)
    }
}

/// LiDAR config for one scene; the noise stream depends on the scene id.
pub fn scene_lidar(lidar: &LidarConfig, scene: &Scene) -> LidarConfig {
    lidar.reseeded(lidar.seed ^ scene_hash(&scene.id))
}

/// Everything the frozen-assignment re-evaluation of one frustum needs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumTerm {
    pub object: Option<usize>,
    /// Indices into the merged cloud (scene points first, then rendered).
    pub indices: Vec<usize>,
    /// Frustum member carrying the maximum car probability.
    pub argmax: Option<usize>,
    pub p: Option<f64>,
    pub iou: f64,
    pub loss: f64,
}

/// Forward record of the point-cloud loss on one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PcTape {
    pub transforms: Vec<RigidTransform>,
    pub scene_points: usize,
    pub hits: Vec<HitRecord>,
    pub rendered: PointCloud,
    pub terms: Vec<FrustumTerm>,
}

impl PcTape {
    pub fn l_mesh(&self) -> f64 {
        self.terms.iter().map(|t| t.loss).sum()
    }
}

/// Point-cloud part of the scene with the mesh placed on every car.
pub fn render_attacked_cloud(scene: &Scene, mesh: &TriMesh, d: &Displacement, clearance: f64, lidar: &LidarConfig) -> Result<(PointCloud, Vec<HitRecord>, PointCloud, Vec<RigidTransform>, TriMesh)> {
    let placements = place_meshes(scene, mesh, d, clearance)?;
    let (merged, ranges) = merge_placements(&placements);
    let (rendered, hits) = render_lidar_grouped(&merged, &ranges, &scene_lidar(lidar, scene));
    let cloud = merge_into_scene(&scene.cloud, &rendered);
    let transforms = placements.iter().map(|p| p.transform).collect();
    Ok((cloud, hits, rendered, transforms, merged))
}

/// `L_mesh` on one scene and its gradient with respect to the displacement.
///
/// IoU weights compare the estimated box with the frustum's labelled car and
/// carry no gradient; a failed box estimate gives weight zero.
pub fn pc_scene_loss(victim: &Victim, scene: &Scene, params: &AttackParams, cfg: &AttackConfig, lidar: &LidarConfig) -> Result<(PcTape, Vec<Vec3>)> {
    let d = params.displacement();
    let (cloud, hits, rendered, transforms, merged) =
        render_attacked_cloud(scene, &params.base, &d, cfg.clearance(), lidar)?;
    let n_scene = scene.cloud.len();
    let cam = scene.camera();
    let projected = project_cloud(&cloud, &cam);
    let proposals = victim.proposals(&scene.image, &scene.objects, cfg.frustum_source)?;

    let mut point_grads = vec![Vec3::zeros(); hits.len()];
    let mut terms = Vec::with_capacity(proposals.len());
    for (k, prop) in proposals.iter().enumerate() {
        let f = extract_frustum_projected(&cloud, &projected, prop);
        let object = match cfg.frustum_source {
            FrustumSource::GroundTruth => Some(k),
            FrustumSource::Detector => None,
        };
        let mut term = FrustumTerm {
            object,
            indices: f.indices.clone(),
            argmax: None,
            p: None,
            iou: 0.0,
            loss: 0.0,
        };
        if f.is_empty() {
            terms.push(term);
            continue;
        }
        let fwd = victim.seg.forward(&f.points);
        let mask = car_mask(&fwd.logits);
        let Some((j, p)) = car_prob_argmax(&fwd.logits) else {
            terms.push(term);
            continue;
        };
        term.argmax = Some(j);
        term.p = Some(p);
        if let Some(est) = estimate_box(&f, &mask) {
            term.iou = match object {
                Some(o) => iou_bev(&est, &scene.objects[o].box3d),
                None => scene.objects.iter().map(|o| iou_bev(&est, &o.box3d)).fold(0.0, f64::max),
            };
        }
        term.loss = mesh_term(p, term.iou);
        let dp = mesh_term_grad(p, term.iou);
        if dp != 0.0 && f.indices.iter().any(|&i| i >= n_scene) {
            let s = dp * p * (1.0 - p);
            let mut dlogits = vec![[0.0; 2]; f.len()];
            dlogits[j] = [-s, s];
            let g = victim.seg.backward(&fwd, &dlogits, None);
            let mean = g.iter().fold(Vec3::zeros(), |a, b| a + b) / g.len() as f64;
            for (gi, &idx) in g.iter().zip(&f.indices) {
                if idx >= n_scene {
                    point_grads[idx - n_scene] += gi - mean;
                }
            }
        }
        terms.push(term);
    }

    let vertex_grads = lidar_backward(&hits, &point_grads, &merged)?;
    let n = params.base.vertex_count();
    let mut dgrad = vec![Vec3::zeros(); n];
    for (k, t) in transforms.iter().enumerate() {
        for (acc, g) in dgrad.iter_mut().zip(deformation_backward(&vertex_grads[k * n..(k + 1) * n], t)) {
            *acc += g;
        }
    }
    Ok((
        PcTape {
            transforms,
            scene_points: n_scene,
            hits,
            rendered,
            terms,
        },
        dgrad,
    ))
}

/// Re-evaluates `L_mesh` for displacement `d` holding the tape's ray-face
/// assignments, frustum memberships, argmax points and IoU weights fixed.
pub fn pc_scene_loss_frozen(victim: &Victim, scene: &Scene, tape: &PcTape, base: &TriMesh, d: &Displacement) -> Result<f64> {
    let meshes: Vec<TriMesh> = tape
        .transforms
        .iter()
        .map(|t| apply_deformation(base, d, t))
        .collect::<Result<_>>()?;
    let refs: Vec<&TriMesh> = meshes.iter().collect();
    let (merged, _) = TriMesh::concat(&refs);
    let rendered: Vec<Vec3> = tape
        .hits
        .iter()
        .zip(&tape.rendered.points)
        .map(|(h, old)| {
            let [a, b, c] = merged.faces[h.face];
            let v0 = merged.vertices[a];
            let n = (merged.vertices[b] - v0).cross(&(merged.vertices[c] - v0));
            let t = n.dot(&(v0 - h.ray.origin)) / n.dot(&h.ray.direction);
            old + (t - h.t) * h.ray.direction
        })
        .collect();
    let point = |i: usize| {
        if i < tape.scene_points {
            scene.cloud.points[i]
        } else {
            rendered[i - tape.scene_points]
        }
    };
    let mut loss = 0.0;
    for term in &tape.terms {
        let Some(j) = term.argmax else { continue };
        let abs: Vec<Vec3> = term.indices.iter().map(|&i| point(i)).collect();
        let centroid = abs.iter().fold(Vec3::zeros(), |a, b| a + b) / abs.len() as f64;
        let centered: Vec<Vec3> = abs.iter().map(|p| p - centroid).collect();
        let logits = victim.seg.forward(&centered).logits;
        loss += mesh_term(car_probability(&logits[j]), term.iou);
    }
    Ok(loss)
}

/// Forward record of the image loss on one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTape {
    pub anchors: Vec<Anchor>,
    pub scores: Vec<f64>,
}

impl ImageTape {
    pub fn loss(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// Scene image with the textured mesh drawn over every car.
pub fn render_attacked_image(scene: &Scene, params: &AttackParams, clearance: f64) -> Result<(RgbImage, crate::raster::CoverageMap, usize)> {
    let placements = place_meshes(scene, &params.textured_base(), &params.displacement(), clearance)?;
    let (merged, _) = merge_placements(&placements);
    let (img, cov) = rasterize(&merged, &scene.camera(), &scene.image);
    Ok((img, cov, merged.vertex_count()))
}

/// Sum of objectness over anchors scoring at least the floor that overlap a
/// labelled car, with its gradient with respect to the vertex colors.
pub fn image_scene_loss(victim: &Victim, scene: &Scene, params: &AttackParams, cfg: &AttackConfig) -> Result<(ImageTape, Vec<[f64; 3]>)> {
    let (img, cov, merged_vertices) = render_attacked_image(scene, params, cfg.clearance())?;
    let scorer = &victim.scorer;
    let ii = IntegralImage::new(&img);
    let mut tape = ImageTape {
        anchors: Vec::new(),
        scores: Vec::new(),
    };
    let mut image_grad = vec![[0.0; 3]; img.data.len()];
    for a in scorer.anchors(img.width, img.height) {
        let b = a.to_box(1.0);
        if !scene.objects.iter().any(|o| o.box2d.iou(&b) >= cfg.objectness_iou) {
            continue;
        }
        let s = scorer.score(&scorer.features(&ii, &a, img.height));
        if s >= cfg.objectness_floor {
            scorer.accumulate_pixel_grad(&img, &ii, &a, 1.0, &mut image_grad);
            tape.anchors.push(a);
            tape.scores.push(s);
        }
    }
    let n = params.base.vertex_count();
    let mut grads = vec![[0.0; 3]; n];
    if !tape.anchors.is_empty() {
        for (i, g) in color_backward(&cov, &image_grad, merged_vertices)?.iter().enumerate() {
            for c in 0..3 {
                grads[i % n][c] += g[c];
            }
        }
    }
    Ok((tape, grads))
}

/// Re-evaluates the image loss for the current colors over the tape's
/// anchor set.
pub fn image_scene_loss_frozen(victim: &Victim, scene: &Scene, tape: &ImageTape, params: &AttackParams, cfg: &AttackConfig) -> Result<f64> {
    let (img, _, _) = render_attacked_image(scene, params, cfg.clearance())?;
    let ii = IntegralImage::new(&img);
    Ok(tape
        .anchors
        .iter()
        .map(|a| victim.scorer.score(&victim.scorer.features(&ii, a, img.height)))
        .sum())
}

/// One optimizer step's worth of bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: Phase,
    pub epoch: usize,
    pub batch: usize,
    pub scene_ids: Vec<String>,
    pub l_mesh: f64,
    pub l_lap: f64,
    pub lambda: f64,
    pub total: f64,
    pub image_loss: f64,
    /// Per frustum: car probability (absent when no point is classed car).
    pub probs: Vec<Option<f64>>,
    pub ious: Vec<f64>,
    /// Largest deformed-extent to limit ratio after the step.
    pub extent_ratio: f64,
    pub color_min: f64,
    pub color_max: f64,
}

impl LossReport {
    /// `|total − (L_mesh + λ·L_lap)|`.
    pub fn decomposition_error(&self) -> f64 {
        (self.total - (self.l_mesh + self.lambda * self.l_lap)).abs()
    }
}

pub fn loss_csv(trail: &[LossReport]) -> String {
    let mut s = String::from("phase,epoch,batch,l_mesh,l_lap,total,image_loss\n");
    for r in trail {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.phase.name(),
            r.epoch,
            r.batch,
            r.l_mesh,
            r.l_lap,
            r.total,
            r.image_loss
        );
    }
    s
}

/// Point-cloud objective of a batch: per-scene tapes, `L_mesh`, `L_lap` and
/// the gradient of `L_mesh + λ·L_lap` with respect to the flat displacement.
pub fn pc_loss(victim: &Victim, batch: &[&Scene], params: &AttackParams, cfg: &AttackConfig, lidar: &LidarConfig) -> Result<(Vec<PcTape>, f64, f64, Vec<f64>)> {
    let per_scene: Vec<Result<(PcTape, Vec<Vec3>)>> = batch
        .par_iter()
        .map(|s| pc_scene_loss(victim, s, params, cfg, lidar))
        .collect();
    let mut tapes = Vec::with_capacity(batch.len());
    let mut buffers = Vec::with_capacity(batch.len() + 1);
    for r in per_scene {
        let (tape, g) = r?;
        tapes.push(tape);
        buffers.push(g.iter().flat_map(|v| [v.x, v.y, v.z]).collect::<Vec<f64>>());
    }
    let l_mesh: f64 = tapes.iter().map(|t| t.l_mesh()).sum();
    let (l_lap, lap_grad) = laplacian_loss_grad(&params.mesh());
    buffers.push(lap_grad.iter().flat_map(|v| [v.x, v.y, v.z]).map(|x| cfg.lambda * x).collect());
    Ok((tapes, l_mesh, l_lap, reduce_ordered(&buffers)))
}

/// Image objective of a batch and its gradient with respect to the flat colors.
pub fn image_loss(victim: &Victim, batch: &[&Scene], params: &AttackParams, cfg: &AttackConfig) -> Result<(Vec<ImageTape>, f64, Vec<f64>)> {
    let per_scene: Vec<Result<(ImageTape, Vec<[f64; 3]>)>> = batch
        .par_iter()
        .map(|s| image_scene_loss(victim, s, params, cfg))
        .collect();
    let mut tapes = Vec::with_capacity(batch.len());
    let mut buffers = Vec::with_capacity(batch.len());
    for r in per_scene {
        let (tape, g) = r?;
        tapes.push(tape);
        buffers.push(g.iter().flatten().copied().collect::<Vec<f64>>());
    }
    let loss = tapes.iter().map(|t| t.loss()).sum();
    let grad = if buffers.is_empty() {
        vec![0.0; params.colors.len()]
    } else {
        reduce_ordered(&buffers)
    };
    Ok((tapes, loss, grad))
}

fn color_range(params: &AttackParams) -> (f64, f64) {
    params
        .colors
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)))
}

/// Runs one phase of the universal attack over `scenes`, updating `params`
/// in place and returning one report per optimizer step.
///
/// Every step is followed by a projection (extent clamp for the shape,
/// `[0, 1]` clamp for the colors) and the constraint is verified.
pub fn run_attack(
    cfg: &AttackConfig,
    phase: Phase,
    scenes: &[&Scene],
    victim: &Victim,
    lidar: &LidarConfig,
    params: &mut AttackParams,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if !victim.gates_passed() {
        return Err(Error::Refused(
            "the victim has not passed its accuracy gates; retrain it before attacking".into(),
        ));
    }
    if phase == Phase::Texture && !params.shape_trained {
        return Err(Error::InvalidState("the texture phase needs a mesh from the shape phase".into()));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to attack"));
    }
    let (epochs, lr) = match phase {
        Phase::Shape => (cfg.shape_epochs, cfg.lr_shape),
        Phase::Texture => (cfg.texture_epochs, cfg.lr_texture),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (phase as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut state = match phase {
        Phase::Shape => AdamState::for_block(AdamConfig::with_lr(lr), &params.displacement),
        Phase::Texture => AdamState::for_block(AdamConfig::with_lr(lr), &params.colors),
    };
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut trail = Vec::new();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| scenes[i]).collect();
            let mut report = LossReport {
                phase,
                epoch,
                batch: bi,
                scene_ids: batch.iter().map(|s| s.id.clone()).collect(),
                l_mesh: 0.0,
                l_lap: 0.0,
                lambda: cfg.lambda,
                total: 0.0,
                image_loss: 0.0,
                probs: Vec::new(),
                ious: Vec::new(),
                extent_ratio: 0.0,
                color_min: 0.0,
                color_max: 0.0,
            };
            match phase {
                Phase::Shape => {
                    let colors_before = params.colors.values.clone();
                    let (tapes, l_mesh, l_lap, grad) = pc_loss(victim, &batch, params, cfg, lidar)?;
                    if !(l_mesh.is_finite() && l_lap.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFinite(format!("point-cloud loss in epoch {epoch} batch {bi}")));
                    }
                    for t in &tapes {
                        report.probs.extend(t.terms.iter().map(|x| x.p));
                        report.ious.extend(t.terms.iter().map(|x| x.iou));
                    }
                    report.l_mesh = l_mesh;
                    report.l_lap = l_lap;
                    report.total = l_mesh + cfg.lambda * l_lap;
                    params.displacement.grad = grad;
                    adam_step(&mut params.displacement, &mut state)?;
                    let clamped = clamp_extents(&params.displacement(), &params.base, &params.limits);
                    params.displacement.values = clamped.to_flat();
                    if params.colors.values != colors_before {
                        return Err(Error::InvalidState("colors changed during the shape phase".into()));
                    }
                }
                Phase::Texture => {
                    let disp_before = params.displacement.values.clone();
                    let (_, loss, grad) = image_loss(victim, &batch, params, cfg)?;
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFinite(format!("image loss in epoch {epoch} batch {bi}")));
                    }
                    report.image_loss = loss;
                    params.colors.grad = grad;
                    adam_step(&mut params.colors, &mut state)?;
                    if params.displacement.values != disp_before {
                        return Err(Error::InvalidState("displacements changed during the texture phase".into()));
                    }
                }
            }
            report.extent_ratio = params.extent_ratio();
            (report.color_min, report.color_max) = color_range(params);
            if report.extent_ratio > 1.0 + 1e-9 {
                return Err(Error::InvalidState(format!("mesh extent ratio {} exceeds the limits", report.extent_ratio)));
            }
            if !params.colors.within_bounds() {
                return Err(Error::InvalidState("vertex colors left [0, 1]".into()));
            }
            trail.push(report);
        }
    }
    match phase {
        Phase::Shape => params.shape_trained = true,
        Phase::Texture => params.texture_trained = true,
    }
    Ok(trail)
}

/// Which sensors see the mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Exposure {
    pub lidar: bool,
    pub camera: bool,
}

/// Scene inputs with the mesh composited into the chosen sensors.
pub fn attacked_inputs(scene: &Scene, params: &AttackParams, cfg: &AttackConfig, lidar: &LidarConfig, exposure: Exposure) -> Result<(PointCloud, RgbImage)> {
    let cloud = if exposure.lidar && !scene.objects.is_empty() {
        render_attacked_cloud(scene, &params.base, &params.displacement(), cfg.clearance(), lidar)?.0
    } else {
        scene.cloud.clone()
    };
    let image = if exposure.camera && !scene.objects.is_empty() {
        render_attacked_image(scene, params, cfg.clearance())?.0
    } else {
        scene.image.clone()
    };
    Ok((cloud, image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn car_prob_cases() {
        assert_eq!(car_prob(&[[10.0, -10.0]; 4]), None);
        assert_eq!(car_prob(&[[0.0, 0.0]]), Some(0.5));
        let logits = [[0.1, 0.3], [2.0, -1.0], [-0.5, 1.5], [0.0, 1.2]];
        let (i, p) = car_prob_argmax(&logits).unwrap();
        assert_eq!(i, 2);
        assert!((p - car_probability(&logits[2])).abs() < 1e-15);
    }

    #[test]
    fn l_mesh_cases() {
        assert!((l_mesh(&[(Some(0.5), 1.0)]) - 0.693147).abs() < 1e-6);
        assert_eq!(l_mesh(&[(Some(0.99), 0.0)]), 0.0);
        assert!((l_mesh(&[(Some(0.9), 0.5)]) - 1.151293).abs() < 1e-6);
        assert_eq!(l_mesh(&[(None, 1.0)]), 0.0);
        assert!(l_mesh(&[(Some(1.0), 1.0)]).is_finite());
    }

    #[test]
    fn mesh_term_grad_matches_difference() {
        for &(p, iou) in &[(0.3, 1.0), (0.75, 0.4), (0.95, 0.8)] {
            let h = 1e-7;
            let num = (mesh_term(p + h, iou) - mesh_term(p - h, iou)) / (2.0 * h);
            assert!((num - mesh_term_grad(p, iou)).abs() < 1e-5);
        }
    }

    #[test]
    fn fresh_params_are_a_gray_sphere() {
        let p = AttackParams::new(&AttackConfig::default()).unwrap();
        assert_eq!(p.base.vertex_count(), 162);
        assert!(p.colors.values.iter().all(|&c| c == 0.5));
        assert!(p.displacement.values.iter().all(|&d| d == 0.0));
        assert!((p.extent_ratio() - 1.0).abs() < 1e-12);
        assert_eq!(p.mesh(), p.textured_base());
    }

    #[test]
    fn params_checkpoint_round_trip() {
        let cfg = AttackConfig::default();
        let mut p = AttackParams::new(&cfg).unwrap();
        p.displacement.values[7] = 0.01;
        p.colors.values[3] = 0.9;
        p.shape_trained = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ckpt");
        p.save(&cfg, &path).unwrap();
        assert_eq!(AttackParams::load(&path).unwrap(), p);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for cfg in [
            AttackConfig { lambda: -1.0, ..AttackConfig::default() },
            AttackConfig { batch_size: 0, ..AttackConfig::default() },
            AttackConfig { radius: 0.0, ..AttackConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let r = LossReport {
            phase: Phase::Shape,
            epoch: 0,
            batch: 1,
            scene_ids: vec![],
            l_mesh: 1.5,
            l_lap: 0.25,
            lambda: 0.1,
            total: 1.525,
            image_loss: 0.0,
            probs: vec![],
            ious: vec![],
            extent_ratio: 1.0,
            color_min: 0.5,
            color_max: 0.5,
        };
        let csv = loss_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("shape,0,1,1.5,0.25,1.525,"));
    }
}
