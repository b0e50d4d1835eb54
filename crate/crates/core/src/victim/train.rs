use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    car_mask, extract_frustum_projected, project_cloud, Box2D, FrustumSource, IntegralImage, ObjectnessScorer,
    ScorerConfig, SegNet, Victim,
};
use crate::dataio::{Difficulty, Scene};
use crate::diffcore::{adam_step, reduce_ordered, AdamConfig, AdamState, ParamBlock};
use crate::eval::{average_precision, proposal_recall, EvalConfig, Scored};
use crate::{Error, Result, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimConfig {
    pub seg_hidden: usize,
    pub seg_epochs: usize,
    pub seg_lr: f64,
    pub seg_batch: usize,
    /// Points per frustum during training; frustums are subsampled.
    pub seg_max_points: usize,
    /// Jittered copies of every labelled 2D box used as extra frustums.
    pub seg_augment: usize,
    /// Points this close outside a car box still count as car.
    pub label_margin: f64,
    pub scorer: ScorerConfig,
    pub scorer_epochs: usize,
    pub scorer_lr: f64,
    pub scorer_batch: usize,
    pub negatives_per_positive: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub hard_negative_rounds: usize,
    pub nms_3d_overlap: f64,
    pub gate_seg_accuracy: f64,
    pub gate_ap: f64,
    pub seed: u64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            seg_hidden: 64,
            seg_epochs: 10,
            seg_lr: 2e-3,
            seg_batch: 8,
            seg_max_points: 512,
            seg_augment: 2,
            label_margin: 0.1,
            scorer: ScorerConfig::default(),
            scorer_epochs: 30,
            scorer_lr: 3e-3,
            scorer_batch: 64,
            negatives_per_positive: 4,
            positive_iou: 0.6,
            negative_iou: 0.3,
            hard_negative_rounds: 1,
            nms_3d_overlap: 0.3,
            gate_seg_accuracy: 0.9,
            gate_ap: 0.8,
            seed: 11,
        }
    }
}

/// Held-out quality of a trained victim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Per-point accuracy on labelled-box frustums.
    pub seg_accuracy: f64,
    /// Moderate BEV AP at IoU 0.5 with detector frustums.
    pub clean_ap: f64,
    pub ap_easy: f64,
    pub ap_moderate: f64,
    pub ap_hard: f64,
    /// Share of labelled cars covered by a proposal at 2D IoU 0.5.
    pub proposal_recall: f64,
    pub passed: bool,
}

struct SegSample {
    points: Vec<Vec3>,
    labels: Vec<bool>,
}

fn seg_sample(scene: &Scene, projected: &super::Projected, b: &Box2D, target: usize, margin: f64) -> Option<SegSample> {
    let f = extract_frustum_projected(&scene.cloud, projected, b);
    if f.len() < super::MIN_BOX_POINTS {
        return None;
    }
    let car = &scene.objects[target].box3d;
    let labels = f
        .indices
        .iter()
        .map(|&i| car.contains_with_margin(&scene.cloud.points[i], margin, margin))
        .collect();
    Some(SegSample { points: f.points, labels })
}

fn jitter_box(b: &Box2D, rng: &mut ChaCha8Rng, w: f64, h: f64) -> Option<Box2D> {
    let (cx, cy) = (0.5 * (b.left + b.right), 0.5 * (b.top + b.bottom));
    let sw = b.width() * rng.random_range(0.9..1.4);
    let sh = b.height() * rng.random_range(0.9..1.4);
    let cx = cx + b.width() * rng.random_range(-0.15..0.15);
    let cy = cy + b.height() * rng.random_range(-0.15..0.15);
    Box2D::new(cx - 0.5 * sw, cy - 0.5 * sh, cx + 0.5 * sw, cy + 0.5 * sh, 1.0)
        .ok()?
        .clipped(w, h)
}

fn apply_adam(blocks: &mut [ParamBlock], states: &mut [AdamState], grads: &[Vec<f64>], scale: f64) -> Result<()> {
    for ((b, s), g) in blocks.iter_mut().zip(states.iter_mut()).zip(grads) {
        for (dst, src) in b.grad.iter_mut().zip(g) {
            *dst = src * scale;
        }
        if b.grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {}", b.name)));
        }
        adam_step(b, s)?;
    }
    Ok(())
}

fn train_scorer(scorer: &mut ObjectnessScorer, scenes: &[&Scene], cfg: &VictimConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut samples: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut negatives: Vec<Vec<super::Anchor>> = Vec::new();
    let mut positives_per_scene = Vec::new();
    for s in scenes {
        let img = &s.image;
        let ii = IntegralImage::new(img);
        let mut neg = Vec::new();
        let mut npos = 0;
        for a in scorer.anchors(img.width, img.height) {
            let b = a.to_box(1.0);
            let best = s.objects.iter().map(|o| o.box2d.iou(&b)).fold(0.0, f64::max);
            if best >= cfg.positive_iou {
                samples.push((scorer.features(&ii, &a, img.height), 1.0));
                npos += 1;
            } else if best < cfg.negative_iou {
                neg.push(a);
            }
        }
        let k = (cfg.negatives_per_positive * npos).max(16).min(neg.len());
        for i in index::sample(rng, neg.len(), k).into_vec() {
            samples.push((scorer.features(&ii, &neg[i], img.height), 0.0));
        }
        negatives.push(neg);
        positives_per_scene.push(npos);
    }
    if samples.is_empty() {
        return Err(Error::Training("no scorer training samples".into()));
    }

    let adam = AdamConfig::with_lr(cfg.scorer_lr);
    let mut states: Vec<AdamState> = scorer.blocks.iter().map(|b| AdamState::for_block(adam, b)).collect();
    let mut fit = |scorer: &mut ObjectnessScorer, samples: &[(Vec<f64>, f64)], epochs: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for batch in order.chunks(cfg.scorer_batch.max(1)) {
                let mut grads = scorer.grad_buffers();
                let mut loss = 0.0;
                for &i in batch {
                    let (f, y) = &samples[i];
                    let (l, hidden) = scorer.logit(f);
                    let p = super::sigmoid(l);
                    loss -= if *y > 0.5 { p.max(1e-300).ln() } else { (1.0 - p).max(1e-300).ln() };
                    scorer.backward(f, &hidden, p - y, Some(&mut grads));
                }
                if !loss.is_finite() {
                    return Err(Error::Training(format!("scorer loss became {loss}")));
                }
                let mut blocks = std::mem::take(&mut scorer.blocks);
                let r = apply_adam(&mut blocks, &mut states, &grads, 1.0 / batch.len() as f64);
                scorer.blocks = blocks;
                r?;
            }
        }
        Ok(())
    };
    fit(scorer, &samples, cfg.scorer_epochs, rng)?;

    for _ in 0..cfg.hard_negative_rounds {
        for (si, s) in scenes.iter().enumerate() {
            let img = &s.image;
            let ii = IntegralImage::new(img);
            let mut scored: Vec<(f64, usize)> = negatives[si]
                .iter()
                .enumerate()
                .map(|(k, a)| (scorer.score(&scorer.features(&ii, a, img.height)), k))
                .filter(|(p, _)| *p >= 0.3)
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let k = (2 * positives_per_scene[si]).max(8);
            for &(_, idx) in scored.iter().take(k) {
                samples.push((scorer.features(&ii, &negatives[si][idx], img.height), 0.0));
            }
        }
        fit(scorer, &samples, cfg.scorer_epochs.div_ceil(2), rng)?;
    }
    scorer.trained = true;
    Ok(())
}

fn seg_samples(victim: &Victim, scenes: &[&Scene], cfg: &VictimConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SegSample>> {
    let mut out = Vec::new();
    for s in scenes {
        let projected = project_cloud(&s.cloud, &s.camera());
        let (w, h) = (s.image.width as f64, s.image.height as f64);
        for (k, o) in s.objects.iter().enumerate() {
            out.extend(seg_sample(s, &projected, &o.box2d, k, cfg.label_margin));
            for _ in 0..cfg.seg_augment {
                if let Some(b) = jitter_box(&o.box2d, rng, w, h) {
                    out.extend(seg_sample(s, &projected, &b, k, cfg.label_margin));
                }
            }
        }
        for p in victim.scorer.propose_2d(&s.image)? {
            let best = s
                .objects
                .iter()
                .enumerate()
                .map(|(k, o)| (o.box2d.iou(&p), k))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            if let Some((iou, k)) = best {
                if iou >= 0.3 {
                    out.extend(seg_sample(s, &projected, &p, k, cfg.label_margin));
                }
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy gradient of one (sub)sampled frustum.
fn seg_grad(seg: &SegNet, points: &[Vec3], labels: &[bool]) -> (f64, Vec<Vec<f64>>) {
    let fwd = seg.forward(points);
    let n = points.len() as f64;
    let mut loss = 0.0;
    let dl: Vec<[f64; 2]> = fwd
        .logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let p1 = super::car_probability(l);
            let p0 = 1.0 - p1;
            loss -= if y { p1.max(1e-300).ln() } else { p0.max(1e-300).ln() };
            let y1 = if y { 1.0 } else { 0.0 };
            [(p0 - (1.0 - y1)) / n, (p1 - y1) / n]
        })
        .collect();
    let mut grads = seg.grad_buffers();
    seg.backward(&fwd, &dl, Some(&mut grads));
    (loss / n, grads)
}

fn train_seg(seg: &mut SegNet, samples: &[SegSample], cfg: &VictimConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let adam = AdamConfig::with_lr(cfg.seg_lr);
    let mut states: Vec<AdamState> = seg.blocks.iter().map(|b| AdamState::for_block(adam, b)).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.seg_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.seg_batch.max(1)) {
            let picks: Vec<(usize, Vec<usize>)> = batch
                .iter()
                .map(|&i| {
                    let n = samples[i].points.len();
                    let mut idx = if n > cfg.seg_max_points {
                        index::sample(rng, n, cfg.seg_max_points).into_vec()
                    } else {
                        (0..n).collect()
                    };
                    idx.sort_unstable();
                    (i, idx)
                })
                .collect();
            let results: Vec<(f64, Vec<Vec<f64>>)> = picks
                .par_iter()
                .map(|(i, idx)| {
                    let s = &samples[*i];
                    let pts: Vec<Vec3> = idx.iter().map(|&k| s.points[k]).collect();
                    let labels: Vec<bool> = idx.iter().map(|&k| s.labels[k]).collect();
                    seg_grad(seg, &pts, &labels)
                })
                .collect();
            let mut grads = Vec::with_capacity(seg.blocks.len());
            for bi in 0..seg.blocks.len() {
                let parts: Vec<Vec<f64>> = results.iter().map(|(_, g)| g[bi].clone()).collect();
                grads.push(reduce_ordered(&parts));
            }
            let loss: f64 = results.iter().map(|(l, _)| l).sum();
            if !loss.is_finite() {
                return Err(Error::Training(format!("segmentation loss became {loss} in epoch {epoch}")));
            }
            epoch_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            apply_adam(&mut seg.blocks, &mut states, &grads, scale)?;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Training(format!("segmentation loss became {epoch_loss} in epoch {epoch}")));
        }
    }
    Ok(())
}

/// Segmentation accuracy, clean AP and proposal recall on `scenes`.
pub fn evaluate_gates(victim: &Victim, scenes: &[&Scene], train_scenes: usize) -> Result<GateReport> {
    let per_scene: Vec<Result<(usize, usize, Vec<Scored>, Vec<Box2D>)>> = scenes
        .par_iter()
        .map(|s| {
            let cam = s.camera();
            let projected = project_cloud(&s.cloud, &cam);
            let (mut correct, mut total) = (0, 0);
            for (k, o) in s.objects.iter().enumerate() {
                if let Some(sample) = seg_sample(s, &projected, &o.box2d, k, victim.config.label_margin) {
                    let logits = victim.seg.forward(&sample.points).logits;
                    for (m, y) in car_mask(&logits).iter().zip(&sample.labels) {
                        correct += (m == y) as usize;
                        total += 1;
                    }
                }
            }
            let props = victim.scorer.propose_2d(&s.image)?;
            let dets = victim.detect_from_proposals(&s.cloud, &cam, &props);
            Ok((correct, total, dets.iter().map(|d| d.scored()).collect(), props))
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    let mut dets = Vec::new();
    let mut props = Vec::new();
    for r in per_scene {
        let (c, t, d, p) = r?;
        correct += c;
        total += t;
        dets.push(d);
        props.push(p);
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    let report = average_precision(&dets, &gts, &EvalConfig::default())?;
    let (hit, n) = proposal_recall(&props, &gts, 0.5);
    let seg_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let ap = |d| report.ap(d).unwrap_or(0.0);
    let clean_ap = ap(Difficulty::Moderate);
    Ok(GateReport {
        train_scenes,
        val_scenes: scenes.len(),
        seg_accuracy,
        clean_ap,
        ap_easy: ap(Difficulty::Easy),
        ap_moderate: clean_ap,
        ap_hard: ap(Difficulty::Hard),
        proposal_recall: if n == 0 { 0.0 } else { hit as f64 / n as f64 },
        passed: seg_accuracy >= victim.config.gate_seg_accuracy && clean_ap >= victim.config.gate_ap,
    })
}

/// Trains the scorer then the segmentation network on the training half of
/// `scenes` and evaluates the gates on the held-out half.
pub fn train_victim(scenes: &[Scene], cfg: &VictimConfig) -> Result<Victim> {
    let (train, val) = crate::dataio::split(scenes);
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("victim training needs scenes in both halves of the split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut victim = Victim {
        config: cfg.clone(),
        scorer: ObjectnessScorer::new(cfg.scorer.clone(), &mut rng),
        seg: SegNet::new(cfg.seg_hidden, &mut rng),
        report: None,
    };
    train_scorer(&mut victim.scorer, &train, cfg, &mut rng)?;
    let samples = seg_samples(&victim, &train, cfg, &mut rng)?;
    if samples.is_empty() {
        return Err(Error::Training("no segmentation training frustums".into()));
    }
    train_seg(&mut victim.seg, &samples, cfg, &mut rng)?;
    for b in victim.scorer.blocks.iter_mut().chain(victim.seg.blocks.iter_mut()) {
        b.zero_grad();
    }
    victim.report = Some(evaluate_gates(&victim, &val, train.len())?);
    Ok(victim)
}

impl Victim {
    /// Detections for every scene with the chosen frustum source.
    pub fn detect_all(&self, scenes: &[&Scene], source: FrustumSource) -> Result<Vec<Vec<super::Detection>>> {
        scenes
            .par_iter()
            .map(|s| self.detect(&s.cloud, &s.image, &s.camera(), &s.objects, source))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthConfig};

    fn tiny() -> (Vec<Scene>, VictimConfig) {
        let scenes = gen_synthetic(&SynthConfig {
            scenes: 12,
            ground_density: 0.5,
            car_density: 15.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = VictimConfig {
            seg_hidden: 16,
            seg_epochs: 2,
            seg_max_points: 128,
            scorer_epochs: 3,
            seg_augment: 1,
            ..VictimConfig::default()
        };
        (scenes, cfg)
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (scenes, cfg) = tiny();
        let a = train_victim(&scenes, &cfg).unwrap();
        let b = train_victim(&scenes, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.scorer.trained);
        let r = a.report.as_ref().unwrap();
        assert!((0.0..=1.0).contains(&r.seg_accuracy));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (scenes, cfg) = tiny();
        let v = train_victim(&scenes, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("victim.ckpt");
        v.save(&p).unwrap();
        assert_eq!(Victim::load(&p).unwrap(), v);
    }

    #[test]
    fn every_detection_has_a_proposal() {
        let (scenes, cfg) = tiny();
        let v = train_victim(&scenes, &cfg).unwrap();
        for s in &scenes {
            let props = v.scorer.propose_2d(&s.image).unwrap();
            for d in v.detect_from_proposals(&s.cloud, &s.camera(), &props) {
                assert!(props.contains(&d.proposal));
            }
            assert!(v.detect_from_proposals(&s.cloud, &s.camera(), &[]).is_empty());
        }
    }
}
