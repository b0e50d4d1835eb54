//! Sliding-window objectness: every anchor is pooled into a coarse grid of
//! mean colors, then scored by a one-hidden-layer perceptron.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nms, Box2D};
use crate::diffcore::ParamBlock;
use crate::raster::RgbImage;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub stride: usize,
    /// Anchor heights in pixels.
    pub anchor_heights: Vec<f64>,
    /// Anchor width / height ratios.
    pub anchor_aspects: Vec<f64>,
    /// Pooling grid is `cells × cells` over the anchor plus its context.
    pub cells: usize,
    /// Context added on each side, as a fraction of anchor width and height.
    pub context: [f64; 2],
    pub hidden: usize,
    pub threshold: f64,
    pub nms_iou: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            stride: 8,
            anchor_heights: vec![16.0, 23.0, 32.0, 45.0, 64.0, 90.0],
            anchor_aspects: vec![1.0, 1.6, 2.4, 3.4],
            cells: 8,
            context: [0.25, 0.5],
            hidden: 32,
            threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

/// Anchor rectangle snapped to whole pixels: columns `x0..x1`, rows `y0..y1`.
/// `window` is the pooled region `[x0, y0, x1, y1]`, the anchor grown by
/// its context and clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub shape: usize,
    pub window: [usize; 4],
}

impl Anchor {
    pub fn to_box(&self, score: f64) -> Box2D {
        Box2D {
            left: self.x0 as f64,
            top: self.y0 as f64,
            right: self.x1 as f64,
            bottom: self.y1 as f64,
            score,
            class_id: super::CAR_CLASS,
        }
    }
}

/// Summed-area table per channel, `(w + 1) × (h + 1)`.
pub struct IntegralImage {
    width: usize,
    sums: Vec<[f64; 3]>,
}

impl IntegralImage {
    pub fn new(img: &RgbImage) -> Self {
        let w = img.width + 1;
        let mut sums = vec![[0.0; 3]; w * (img.height + 1)];
        for y in 0..img.height {
            let mut row = [0.0; 3];
            for x in 0..img.width {
                let p = img.get(x, y);
                for c in 0..3 {
                    row[c] += p[c];
                    sums[(y + 1) * w + x + 1][c] = sums[y * w + x + 1][c] + row[c];
                }
            }
        }
        IntegralImage { width: w, sums }
    }

    fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> [f64; 3] {
        let w = self.width;
        let (a, b, c, d) = (self.sums[y0 * w + x0], self.sums[y0 * w + x1], self.sums[y1 * w + x0], self.sums[y1 * w + x1]);
        [0, 1, 2].map(|k| d[k] - b[k] - c[k] + a[k])
    }
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}

fn lrelu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.01
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const EXTRA_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessScorer {
    pub config: ScorerConfig,
    /// `[w1 (hidden × in), b1, w2 (1 × hidden), b2]`.
    pub blocks: Vec<ParamBlock>,
    pub trained: bool,
}

impl ObjectnessScorer {
    pub fn new(config: ScorerConfig, rng: &mut impl Rng) -> Self {
        let n_in = Self::input_len(&config);
        let h = config.hidden;
        let b1 = (6.0 / n_in as f64).sqrt();
        let b2 = (6.0 / h as f64).sqrt();
        let w1: Vec<f64> = (0..h * n_in).map(|_| rng.random_range(-b1..b1)).collect();
        let w2: Vec<f64> = (0..h).map(|_| rng.random_range(-b2..b2)).collect();
        let blocks = vec![
            ParamBlock::new("scorer.l1.w", h, n_in, w1).expect("shape"),
            ParamBlock::zeros("scorer.l1.b", h, 1),
            ParamBlock::new("scorer.l2.w", 1, h, w2).expect("shape"),
            ParamBlock::zeros("scorer.l2.b", 1, 1),
        ];
        ObjectnessScorer {
            config,
            blocks,
            trained: false,
        }
    }

    pub fn input_len(config: &ScorerConfig) -> usize {
        3 * config.cells * config.cells + EXTRA_FEATURES
    }

    pub fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| vec![0.0; b.len()]).collect()
    }

    /// Anchor grid over an image, clipped to its bounds. Anchors losing more
    /// than half their area to clipping are dropped.
    pub fn anchors(&self, width: usize, height: usize) -> Vec<Anchor> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let s = cfg.stride.max(1);
        let mut cy = s / 2;
        while cy < height {
            let mut cx = s / 2;
            while cx < width {
                for (hi, &ah) in cfg.anchor_heights.iter().enumerate() {
                    for (ai, &aspect) in cfg.anchor_aspects.iter().enumerate() {
                        let aw = ah * aspect;
                        let l = cx as f64 - 0.5 * aw;
                        let t = cy as f64 - 0.5 * ah;
                        let x0 = l.round().max(0.0) as usize;
                        let y0 = t.round().max(0.0) as usize;
                        let x1 = ((l + aw).round() as usize).min(width);
                        let y1 = ((t + ah).round() as usize).min(height);
                        if x1 <= x0 + 1 || y1 <= y0 + 1 {
                            continue;
                        }
                        if ((x1 - x0) * (y1 - y0)) as f64 >= 0.5 * aw * ah {
                            let (mx, my) = (cfg.context[0] * aw, cfg.context[1] * ah);
                            let window = [
                                (l - mx).round().max(0.0) as usize,
                                (t - my).round().max(0.0) as usize,
                                ((l + aw + mx).round() as usize).min(width),
                                ((t + ah + my).round() as usize).min(height),
                            ];
                            out.push(Anchor {
                                x0,
                                y0,
                                x1,
                                y1,
                                shape: hi * cfg.anchor_aspects.len() + ai,
                                window,
                            });
                        }
                    }
                }
                cx += s;
            }
            cy += s;
        }
        out
    }

    /// Pixel bounds of pooling cell `(i, j)` (column, row).
    fn cell_bounds(&self, a: &Anchor, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let g = self.config.cells;
        let [wx0, wy0, wx1, wy1] = a.window;
        let split = |lo: usize, hi: usize, k: usize| lo + ((hi - lo) * k + g / 2) / g;
        let (mut x0, mut x1) = (split(wx0, wx1, i), split(wx0, wx1, i + 1));
        let (mut y0, mut y1) = (split(wy0, wy1, j), split(wy0, wy1, j + 1));
        if x1 <= x0 {
            x0 = x0.min(wx1 - 1);
            x1 = x0 + 1;
        }
        if y1 <= y0 {
            y0 = y0.min(wy1 - 1);
            y1 = y0 + 1;
        }
        (x0, y0, x1, y1)
    }

    pub fn features(&self, ii: &IntegralImage, a: &Anchor, height: usize) -> Vec<f64> {
        let g = self.config.cells;
        let mut f = Vec::with_capacity(Self::input_len(&self.config));
        for j in 0..g {
            for i in 0..g {
                let (x0, y0, x1, y1) = self.cell_bounds(a, i, j);
                let s = ii.rect_sum(x0, y0, x1, y1);
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                f.extend(s.iter().map(|v| v / n - 0.5));
            }
        }
        let h = (a.y1 - a.y0) as f64;
        f.push(h / 64.0);
        f.push((a.x1 - a.x0) as f64 / h / 3.0);
        f.push(0.5 * (a.y0 + a.y1) as f64 / height as f64);
        f
    }

    /// Logit plus hidden pre-activations.
    pub fn logit(&self, features: &[f64]) -> (f64, Vec<f64>) {
        let h = self.config.hidden;
        let n = features.len();
        let (w1, b1, w2, b2) = (&self.blocks[0].values, &self.blocks[1].values, &self.blocks[2].values, &self.blocks[3].values);
        let mut z = vec![0.0; h];
        let mut out = b2[0];
        for o in 0..h {
            let row = &w1[o * n..(o + 1) * n];
            z[o] = b1[o] + row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
            out += w2[o] * lrelu(z[o]);
        }
        (out, z)
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features).0)
    }

    /// Gradient of the logit with respect to the features; accumulates
    /// `dlogit ×` weight gradients when `weight_grads` is given.
    pub fn backward(&self, features: &[f64], hidden: &[f64], dlogit: f64, weight_grads: Option<&mut [Vec<f64>]>) -> Vec<f64> {
        let h = self.config.hidden;
        let n = features.len();
        let w1 = &self.blocks[0].values;
        let w2 = &self.blocks[2].values;
        let dz: Vec<f64> = (0..h).map(|o| dlogit * w2[o] * lrelu_grad(hidden[o])).collect();
        let mut df = vec![0.0; n];
        for o in 0..h {
            if dz[o] == 0.0 {
                continue;
            }
            let row = &w1[o * n..(o + 1) * n];
            for (d, w) in df.iter_mut().zip(row) {
                *d += dz[o] * w;
            }
        }
        if let Some(g) = weight_grads {
            for o in 0..h {
                let row = &mut g[0][o * n..(o + 1) * n];
                for (r, x) in row.iter_mut().zip(features) {
                    *r += dz[o] * x;
                }
                g[1][o] += dz[o];
                g[2][o] += dlogit * lrelu(hidden[o]);
            }
            g[3][0] += dlogit;
        }
        df
    }

    /// Adds `dscore ×` the gradient of the anchor's objectness score into a
    /// per-pixel image gradient.
    pub fn accumulate_pixel_grad(&self, img: &RgbImage, ii: &IntegralImage, a: &Anchor, dscore: f64, image_grad: &mut [[f64; 3]]) {
        let f = self.features(ii, a, img.height);
        let (l, hidden) = self.logit(&f);
        let s = sigmoid(l);
        let df = self.backward(&f, &hidden, dscore * s * (1.0 - s), None);
        let g = self.config.cells;
        for j in 0..g {
            for i in 0..g {
                let (x0, y0, x1, y1) = self.cell_bounds(a, i, j);
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                let base = 3 * (j * g + i);
                let d = [df[base] / n, df[base + 1] / n, df[base + 2] / n];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = &mut image_grad[y * img.width + x];
                        for c in 0..3 {
                            p[c] += d[c];
                        }
                    }
                }
            }
        }
    }

    /// Every anchor with its objectness score.
    pub fn score_anchors(&self, img: &RgbImage) -> Vec<(Anchor, f64)> {
        let ii = IntegralImage::new(img);
        self.anchors(img.width, img.height)
            .into_iter()
            .map(|a| {
                let s = self.score(&self.features(&ii, &a, img.height));
                (a, s)
            })
            .collect()
    }

    /// Anchors above threshold after greedy non-maximum suppression.
    pub fn propose_2d(&self, img: &RgbImage) -> Result<Vec<Box2D>> {
        if !self.trained {
            return Err(Error::InvalidState("objectness scorer has not been trained".into()));
        }
        let boxes: Vec<Box2D> = self
            .score_anchors(img)
            .into_iter()
            .filter(|(_, s)| *s >= self.config.threshold)
            .map(|(a, s)| a.to_box(s))
            .collect();
        Ok(nms(boxes, self.config.nms_iou))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::filled(w, h, [0.0; 3]);
        for p in img.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        img
    }

    #[test]
    fn untrained_scorer_refuses() {
        let s = ObjectnessScorer::new(ScorerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(s.propose_2d(&noisy(64, 32, 0)), Err(Error::InvalidState(_))));
    }

    #[test]
    fn integral_image_sums_match_brute_force() {
        let img = noisy(13, 7, 1);
        let ii = IntegralImage::new(&img);
        let s = ii.rect_sum(2, 1, 9, 6);
        let mut brute = [0.0; 3];
        for y in 1..6 {
            for x in 2..9 {
                for c in 0..3 {
                    brute[c] += img.get(x, y)[c];
                }
            }
        }
        for c in 0..3 {
            assert!((s[c] - brute[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn anchors_stay_inside_the_image() {
        let s = ObjectnessScorer::new(ScorerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let anchors = s.anchors(100, 40);
        assert!(!anchors.is_empty());
        for a in anchors {
            assert!(a.x1 <= 100 && a.y1 <= 40 && a.x0 < a.x1 && a.y0 < a.y1);
            let [wx0, wy0, wx1, wy1] = a.window;
            assert!(wx0 <= a.x0 && wy0 <= a.y0 && wx1 >= a.x1 && wy1 >= a.y1 && wx1 <= 100 && wy1 <= 40);
        }
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let cfg = ScorerConfig {
            cells: 3,
            hidden: 8,
            ..ScorerConfig::default()
        };
        let s = ObjectnessScorer::new(cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let img = noisy(24, 20, 5);
        let a = Anchor {
            x0: 3,
            y0: 2,
            x1: 20,
            y1: 17,
            shape: 0,
            window: [1, 0, 22, 19],
        };
        let mut grad = vec![[0.0; 3]; img.data.len()];
        s.accumulate_pixel_grad(&img, &IntegralImage::new(&img), &a, 1.0, &mut grad);
        let mut block = ParamBlock::new("img", img.data.len(), 3, img.data.iter().flatten().copied().collect()).unwrap();
        block.grad = grad.iter().flatten().copied().collect();
        let report = finite_diff_check(
            |b| {
                let mut probe = img.clone();
                for (p, c) in probe.data.iter_mut().zip(b.values.chunks_exact(3)) {
                    *p = [c[0], c[1], c[2]];
                }
                let ii = IntegralImage::new(&probe);
                Ok(s.score(&s.features(&ii, &a, probe.height)))
            },
            &block,
            1e-6,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let cfg = ScorerConfig {
            cells: 2,
            hidden: 5,
            ..ScorerConfig::default()
        };
        let s = ObjectnessScorer::new(cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let f: Vec<f64> = (0..ObjectnessScorer::input_len(&s.config)).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, hidden) = s.logit(&f);
        let mut grads = s.grad_buffers();
        s.backward(&f, &hidden, 1.0, Some(&mut grads));
        for bi in 0..4 {
            let mut block = s.blocks[bi].clone();
            block.grad = grads[bi].clone();
            let report = finite_diff_check(
                |b| {
                    let mut probe = s.clone();
                    probe.blocks[bi].values = b.values.clone();
                    Ok(probe.logit(&f).0)
                },
                &block,
                1e-6,
                1e-6,
                None,
            )
            .unwrap();
            assert!(report.passed());
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
