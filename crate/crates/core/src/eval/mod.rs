//! Rotated IoU, KITTI-style average precision and attack tables.

mod iou;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use iou::{bev_intersection, clip_polygon, iou_3d, iou_bev, polygon_area};

use crate::dataio::{Difficulty, GroundTruth};
use crate::victim::{Box2D, Box3D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub view: View,
    pub difficulties: Vec<Difficulty>,
    /// 40 samples recall at k/40 for k = 1..40; 11 samples recall at k/10
    /// for k = 0..10; other counts use k/N for k = 1..N.
    pub points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            view: View::Bev,
            difficulties: Difficulty::ALL.to_vec(),
            points: 40,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid(format!("IoU threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.points == 0 {
            return Err(Error::invalid("AP needs at least one recall sample"));
        }
        Ok(())
    }

    pub fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self.view {
            View::Bev => iou_bev(a, b),
            View::ThreeD => iou_3d(a, b),
        }
    }

    pub fn recall_samples(&self) -> Vec<f64> {
        let n = self.points;
        if n == 11 {
            (0..=10).map(|k| k as f64 / 10.0).collect()
        } else {
            (1..=n).map(|k| k as f64 / n as f64).collect()
        }
    }
}

/// A scored 3D detection in one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub box3d: Box3D,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAP {
    pub difficulty: Difficulty,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub num_tp: usize,
    /// One sample per distinct score threshold, descending.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub config: EvalConfig,
    pub buckets: Vec<BucketAP>,
}

impl APReport {
    pub fn ap(&self, d: Difficulty) -> Option<f64> {
        self.buckets.iter().find(|b| b.difficulty == d).map(|b| b.ap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy score-descending matching in one scene. Ground truths outside the
/// bucket absorb detections without counting them.
fn match_scene(dets: &[Scored], gts: &[GroundTruth], d: Difficulty, cfg: &EvalConfig) -> Vec<(f64, Outcome)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in order {
        let det = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (g, gt) in gts.iter().enumerate() {
            let iou = cfg.iou(&det.box3d, &gt.box3d);
            if iou < cfg.iou_threshold {
                continue;
            }
            if !gt.in_bucket(d) {
                hits_ignored = true;
            } else if !taken[g] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let outcome = match best {
            Some((g, _)) => {
                taken[g] = true;
                Outcome::Tp
            }
            None if hits_ignored => Outcome::Ignored,
            None => Outcome::Fp,
        };
        out.push((det.score, outcome));
    }
    out
}

/// Interpolated AP from precision/recall samples: mean over the configured
/// recall points of the best precision at recall at least that point.
pub fn interpolated_ap(recall: &[f64], precision: &[f64], cfg: &EvalConfig) -> f64 {
    let samples = cfg.recall_samples();
    let total: f64 = samples
        .iter()
        .map(|&r| {
            recall
                .iter()
                .zip(precision)
                .filter(|(rc, _)| **rc >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / samples.len() as f64
}

pub fn bucket_ap(dets: &[Vec<Scored>], gts: &[Vec<GroundTruth>], d: Difficulty, cfg: &EvalConfig) -> BucketAP {
    let mut all: Vec<(f64, Outcome)> = dets
        .iter()
        .zip(gts)
        .flat_map(|(ds, gs)| match_scene(ds, gs, d, cfg))
        .filter(|(_, o)| *o != Outcome::Ignored)
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.in_bucket(d)).count()).sum();
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            match all[i].1 {
                Outcome::Tp => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = if num_gt == 0 { 0.0 } else { interpolated_ap(&recall, &precision, cfg) };
    BucketAP {
        difficulty: d,
        ap,
        num_gt,
        num_det: all.len(),
        num_tp: tp,
        recall,
        precision,
    }
}

/// AP for every configured difficulty. `dets[k]` and `gts[k]` belong to the
/// same scene.
pub fn average_precision(dets: &[Vec<Scored>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> Result<APReport> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!("{} detection lists for {} scenes", dets.len(), gts.len())));
    }
    Ok(APReport {
        config: cfg.clone(),
        buckets: cfg.difficulties.iter().map(|&d| bucket_ap(dets, gts, d, cfg)).collect(),
    })
}

/// Fraction of ground-truth boxes covered by some proposal at 2D IoU at
/// least `iou`, as `(covered, total)`.
pub fn proposal_recall(proposals: &[Vec<Box2D>], gts: &[Vec<GroundTruth>], iou: f64) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (ps, gs) in proposals.iter().zip(gts) {
        for g in gs {
            total += 1;
            if ps.iter().any(|p| p.iou(&g.box2d) >= iou) {
                hit += 1;
            }
        }
    }
    (hit, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub difficulty: Difficulty,
    pub clean: f64,
    pub attacked: f64,
    pub absolute: f64,
    /// `(clean − attacked) / clean`; zero when the clean AP is zero.
    pub relative: f64,
}

pub fn attack_delta(clean: &APReport, attacked: &APReport) -> Result<Vec<DeltaRow>> {
    if clean.config != attacked.config {
        return Err(Error::invalid("AP reports were computed with different evaluation configs"));
    }
    Ok(clean
        .buckets
        .iter()
        .zip(&attacked.buckets)
        .map(|(c, a)| DeltaRow {
            difficulty: c.difficulty,
            clean: c.ap,
            attacked: a.ap,
            absolute: c.ap - a.ap,
            relative: if c.ap > 0.0 { (c.ap - a.ap) / c.ap } else { 0.0 },
        })
        .collect())
}

pub const ROW_CLEAN: &str = "No Attack";
pub const ROW_PC: &str = "PC: Adv Shape";
pub const ROW_IMG: &str = "Img: Adv Texture";
pub const ROW_BOTH: &str = "PC + Img: Adv Object";

/// Rows of AP reports sharing one config, rendered with difficulties as
/// columns and AP in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub rows: Vec<(String, APReport)>,
}

impl ApTable {
    pub fn get(&self, name: &str) -> Option<&APReport> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    fn columns(&self) -> Vec<Difficulty> {
        self.rows
            .first()
            .map(|(_, r)| r.buckets.iter().map(|b| b.difficulty).collect())
            .unwrap_or_default()
    }

    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:width$}", "Attack");
        for d in &cols {
            let _ = write!(s, "  {:>8}", d.name());
        }
        s.push('\n');
        for (name, r) in &self.rows {
            let _ = write!(s, "{name:width$}");
            for b in &r.buckets {
                let _ = write!(s, "  {:>8.2}", 100.0 * b.ap);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("attack");
        for d in self.columns() {
            let _ = write!(s, ",{}", d.name());
        }
        s.push('\n');
        for (name, r) in &self.rows {
            s.push_str(name);
            for b in &r.buckets {
                let _ = write!(s, ",{:.6}", 100.0 * b.ap);
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;

    fn gt_at(x: f64) -> GroundTruth {
        GroundTruth {
            box3d: Box3D::new(Vec3::new(x, 0.0, 0.0), 1.5, 1.6, 4.0, 0.0).unwrap(),
            box2d: Box2D::new(0.0, 0.0, 50.0, 50.0, 1.0).unwrap(),
            truncation: 0.0,
            occlusion: 0,
        }
    }

    fn det_at(x: f64, score: f64) -> Scored {
        Scored {
            box3d: Box3D::new(Vec3::new(x, 0.0, 0.0), 1.5, 1.6, 4.0, 0.0).unwrap(),
            score,
        }
    }

    fn moderate() -> EvalConfig {
        EvalConfig {
            difficulties: vec![Difficulty::Moderate],
            ..EvalConfig::default()
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![gt_at(10.0), gt_at(20.0)]];
        let perfect = vec![vec![det_at(10.0, 0.9), det_at(20.0, 0.8)]];
        let r = average_precision(&perfect, &gts, &moderate()).unwrap();
        assert_eq!(r.buckets[0].ap, 1.0);
        let none = vec![vec![]];
        assert_eq!(average_precision(&none, &gts, &moderate()).unwrap().buckets[0].ap, 0.0);
    }

    #[test]
    fn tp_fp_tp_case() {
        let gts = vec![vec![gt_at(10.0), gt_at(20.0)]];
        let dets = vec![vec![det_at(10.0, 0.9), det_at(40.0, 0.8), det_at(20.0, 0.7)]];
        let r = average_precision(&dets, &gts, &moderate()).unwrap();
        let b = &r.buckets[0];
        assert_eq!(b.recall, vec![0.5, 0.5, 1.0]);
        assert_eq!(b.precision, vec![1.0, 0.5, 2.0 / 3.0]);
        // recall ≤ 0.5 → precision 1, recall in (0.5, 1] → 2/3
        let expected = (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
        assert!((b.ap - expected).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_matched_once() {
        let gts = vec![vec![gt_at(10.0)]];
        let dets = vec![vec![det_at(10.0, 0.9), det_at(10.1, 0.8)]];
        let b = &average_precision(&dets, &gts, &moderate()).unwrap().buckets[0];
        assert_eq!(b.num_tp, 1);
        assert_eq!(b.num_det, 2);
    }

    #[test]
    fn out_of_bucket_truth_is_ignored() {
        let mut hard = gt_at(30.0);
        hard.occlusion = 2;
        let gts = vec![vec![gt_at(10.0), hard]];
        let dets = vec![vec![det_at(30.0, 0.95), det_at(10.0, 0.9)]];
        let b = &average_precision(&dets, &gts, &moderate()).unwrap().buckets[0];
        assert_eq!(b.num_gt, 1);
        assert_eq!(b.num_det, 1);
        assert_eq!(b.ap, 1.0);
    }

    #[test]
    fn paper_deltas() {
        let report = |ap: f64| APReport {
            config: moderate(),
            buckets: vec![BucketAP {
                difficulty: Difficulty::Moderate,
                ap,
                num_gt: 1,
                num_det: 1,
                num_tp: 1,
                recall: vec![],
                precision: vec![],
            }],
        };
        let d = attack_delta(&report(0.8566), &report(0.2750)).unwrap();
        assert!((d[0].relative - 0.679).abs() < 5e-4);
        let d = attack_delta(&report(0.8362), &report(0.2267)).unwrap();
        assert!((d[0].relative - 0.729).abs() < 5e-4);
        let d = attack_delta(&report(0.5), &report(0.5)).unwrap();
        assert_eq!((d[0].absolute, d[0].relative), (0.0, 0.0));
        let mut other = report(0.5);
        other.config.iou_threshold = 0.7;
        assert!(attack_delta(&report(0.5), &other).is_err());
    }

    #[test]
    fn table_rendering() {
        let r = average_precision(&[vec![det_at(10.0, 0.9)]], &[vec![gt_at(10.0)]], &EvalConfig::default()).unwrap();
        let t = ApTable {
            rows: vec![(ROW_CLEAN.into(), r.clone()), (ROW_BOTH.into(), r)],
        };
        let text = t.to_text();
        assert!(text.lines().next().unwrap().contains("Moderate"));
        assert!(text.contains("PC + Img: Adv Object"));
        assert_eq!(t.to_csv().lines().count(), 3);
    }

    #[test]
    fn proposal_recall_counts() {
        let gts = vec![vec![gt_at(10.0), gt_at(20.0)]];
        let props = vec![vec![Box2D::new(0.0, 0.0, 50.0, 45.0, 0.9).unwrap()]];
        assert_eq!(proposal_recall(&props, &gts, 0.5), (2, 2));
        assert_eq!(proposal_recall(&[vec![]], &gts, 0.5), (0, 2));
    }
}
