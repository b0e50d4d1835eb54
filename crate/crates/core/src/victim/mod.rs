//! Desk-scale cascaded detector: 2D objectness proposals gate frustums of
//! LiDAR points, a PointNet-style network segments each frustum, and a
//! geometric fit turns the car points into a 3D box.

mod boxes;
mod estimator;
mod frustum;
mod scorer;
mod segnet;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use boxes::{nms, wrap_angle, Box2D, Box3D, CAR_CLASS};
pub use estimator::{estimate_box, estimate_box_with_support, fit_box, fit_box_trimmed, largest_cluster, BOX_TRIM, CLUSTER_RADIUS, MIN_BOX_POINTS};
pub use frustum::{extract_frustum, extract_frustum_projected, project_cloud, Frustum, Projected};
pub use scorer::{sigmoid, Anchor, IntegralImage, ObjectnessScorer, ScorerConfig};
pub use segnet::{car_probability, SegForward, SegNet, INPUT_SCALE};
pub use train::{evaluate_gates, train_victim, GateReport, VictimConfig};

use crate::dataio::GroundTruth;
use crate::diffcore::{Checkpoint, CheckpointBlock, ParamBlock};
use crate::eval::{bev_intersection, Scored};
use crate::lidar::PointCloud;
use crate::raster::{CameraModel, RgbImage};
use crate::{Error, Result};

/// Where frustums come from: the labelled 2D boxes or the detector's own
/// proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrustumSource {
    GroundTruth,
    Detector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
    /// The 2D proposal whose frustum produced this box.
    pub proposal: Box2D,
    /// Car points behind the box.
    pub support: usize,
}

impl Detection {
    pub fn scored(&self) -> Scored {
        Scored {
            box3d: self.box3d,
            score: self.score,
        }
    }
}

/// Car mask from logits; a tie counts as car.
pub fn car_mask(logits: &[[f64; 2]]) -> Vec<bool> {
    logits.iter().map(|l| l[1] >= l[0]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Victim {
    pub config: VictimConfig,
    pub scorer: ObjectnessScorer,
    pub seg: SegNet,
    pub report: Option<GateReport>,
}

impl Victim {
    pub fn segment(&self, frustum: &Frustum) -> Vec<[f64; 2]> {
        self.seg.forward(&frustum.points).logits
    }

    pub fn proposals(&self, image: &RgbImage, objects: &[GroundTruth], source: FrustumSource) -> Result<Vec<Box2D>> {
        match source {
            FrustumSource::GroundTruth => Ok(objects.iter().map(|o| Box2D { score: 1.0, ..o.box2d }).collect()),
            FrustumSource::Detector => self.scorer.propose_2d(image),
        }
    }

    /// 3D detections from given 2D proposals, sorted by score. Boxes are
    /// suppressed greedily in order of support: a box is dropped when its
    /// ground-plane overlap with a kept box exceeds `nms_3d_overlap` of the
    /// smaller footprint. Every detection carries its generating proposal.
    pub fn detect_from_proposals(&self, cloud: &PointCloud, cam: &CameraModel, proposals: &[Box2D]) -> Vec<Detection> {
        let projected = project_cloud(cloud, cam);
        let mut dets: Vec<Detection> = proposals
            .iter()
            .filter_map(|p| {
                let f = extract_frustum_projected(cloud, &projected, p);
                if f.is_empty() {
                    return None;
                }
                let mask = car_mask(&self.segment(&f));
                estimate_box_with_support(&f, &mask).map(|(box3d, support)| Detection {
                    box3d,
                    score: p.score,
                    proposal: *p,
                    support,
                })
            })
            .collect();
        dets.sort_by(|a, b| b.support.cmp(&a.support).then(b.score.total_cmp(&a.score)));
        let mut keep: Vec<Detection> = Vec::new();
        for d in dets {
            let area = d.box3d.length * d.box3d.width;
            let overlaps = keep.iter().any(|k| {
                let smaller = area.min(k.box3d.length * k.box3d.width);
                bev_intersection(&k.box3d, &d.box3d) > self.config.nms_3d_overlap * smaller
            });
            if !overlaps {
                keep.push(d);
            }
        }
        keep.sort_by(|a, b| b.score.total_cmp(&a.score));
        keep
    }

    pub fn detect(
        &self,
        cloud: &PointCloud,
        image: &RgbImage,
        cam: &CameraModel,
        objects: &[GroundTruth],
        source: FrustumSource,
    ) -> Result<Vec<Detection>> {
        let proposals = self.proposals(image, objects, source)?;
        Ok(self.detect_from_proposals(cloud, cam, &proposals))
    }

    pub fn gates_passed(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.passed)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "victim",
            "config": self.config,
            "report": self.report,
            "scorer_trained": self.scorer.trained,
        });
        let mut ck = Checkpoint::new(meta);
        for b in self.scorer.blocks.iter().chain(&self.seg.blocks) {
            ck.push(CheckpointBlock::from_param(b));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("victim") {
            return Err(Error::invalid("checkpoint does not hold a victim"));
        }
        let config: VictimConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let report: Option<GateReport> = serde_json::from_value(ck.meta["report"].clone())?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut v = Victim {
            scorer: ObjectnessScorer::new(config.scorer.clone(), &mut rng),
            seg: SegNet::new(config.seg_hidden, &mut rng),
            config,
            report,
        };
        let load = |b: &mut ParamBlock| -> Result<()> {
            let src = ck.block(&b.name)?;
            if src.rows != b.rows || src.cols != b.cols {
                return Err(Error::invalid(format!("checkpoint block {} has the wrong shape", b.name)));
            }
            b.values = src.values.clone();
            Ok(())
        };
        for b in v.scorer.blocks.iter_mut().chain(v.seg.blocks.iter_mut()) {
            load(b)?;
        }
        v.scorer.trained = ck.meta["scorer_trained"].as_bool().unwrap_or(false);
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
