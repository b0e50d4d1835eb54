//! Learnable parameters, gradient accumulation, ADAM and a central
//! finite-difference checker.
//!
//! Gradients are hand-derived per operation and accumulated into
//! [`ParamBlock::grad`] by explicit backward calls. Parallel workers each fill
//! a private buffer; [`reduce_ordered`] sums them in index order so results
//! do not depend on scheduling.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointBlock};

/// Flat parameter storage with a named `rows × cols` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    /// Optional per-scalar `[lo, hi]`, enforced after every optimizer step.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "block {name}: {} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        Ok(ParamBlock {
            name,
            rows,
            cols,
            grad: vec![0.0; values.len()],
            values,
            bounds: None,
        })
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, rows, cols, vec![0.0; rows * cols]).expect("shape matches")
    }

    /// Same `[lo, hi]` for every scalar; current values are clamped into it.
    pub fn with_uniform_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some(vec![(lo, hi); self.values.len()]);
        self.clamp_to_bounds();
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `g` elementwise into the accumulator.
    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.grad.len() {
            return Err(Error::invalid(format!(
                "block {}: gradient length {} != {}",
                self.name,
                g.len(),
                self.grad.len()
            )));
        }
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn clamp_to_bounds(&mut self) {
        if let Some(bounds) = &self.bounds {
            for (v, &(lo, hi)) in self.values.iter_mut().zip(bounds) {
                *v = v.clamp(lo, hi);
            }
        }
    }

    pub fn within_bounds(&self) -> bool {
        match &self.bounds {
            Some(b) => self.values.iter().zip(b).all(|(v, &(lo, hi))| lo <= *v && *v <= hi),
            None => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First/second moment estimates for one [`ParamBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn for_block(config: AdamConfig, block: &ParamBlock) -> Self {
        Self::new(config, block.len())
    }
}

/// One bias-corrected ADAM update from the accumulated gradient, followed by
/// clamping to the block's bounds. Gradients are left untouched.
pub fn adam_step(params: &mut ParamBlock, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam state for {} has {} moments, block has {} values",
            params.name,
            state.m.len(),
            params.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = params.grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.clamp_to_bounds();
    Ok(())
}

/// Sums equally-sized gradient buffers in index order.
pub fn reduce_ordered(buffers: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = buffers.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for b in buffers {
        for (o, x) in out.iter_mut().zip(b) {
            *o += x;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub failing: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Compares `params.grad` against central differences of `f`.
///
/// Relative error at index i is `|a − n| / max(1, |a|, |n|)`. `indices`
/// restricts the check to a subset; `None` checks every scalar.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamBlock,
    epsilon: f64,
    tolerance: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamBlock) -> Result<f64>,
{
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut probe = params.clone();
    probe.bounds = None;
    let mut eval = |probe: &ParamBlock| -> Result<f64> {
        let y = f(probe)?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite(format!("objective returned {y} during gradient check of {}", params.name)))
        }
    };
    eval(&probe)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        failing: Vec::new(),
        analytic: Vec::with_capacity(indices.len()),
        numeric: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let x0 = probe.values[i];
        probe.values[i] = x0 + epsilon;
        let up = eval(&probe)?;
        probe.values[i] = x0 - epsilon;
        let down = eval(&probe)?;
        probe.values[i] = x0;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = params.grad[i];
        let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel > tolerance {
            report.failing.push(i);
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_deformation, laplacian_loss, laplacian_loss_grad, make_icosphere, Displacement, RigidTransform};
    use crate::Vec3;

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = ParamBlock::new("x", 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let mut s = AdamState::for_block(AdamConfig::with_lr(0.1), &p);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.values, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(s.step, 2);
    }

    #[test]
    fn first_step_hand_computed() {
        let g = 0.3;
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = ParamBlock::new("x", 1, 1, vec![2.0]).unwrap();
        p.grad[0] = g;
        let mut s = AdamState::for_block(cfg, &p);
        adam_step(&mut p, &mut s).unwrap();
        // m = 0.1 g, v = 0.001 g², bias-corrected back to g and g².
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expect = 2.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.values[0] - expect).abs() < 1e-15);
        assert!((p.values[0] - (2.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn bounded_value_stays_at_bound() {
        let mut p = ParamBlock::new("c", 1, 1, vec![1.0]).unwrap().with_uniform_bounds(0.0, 1.0);
        p.grad[0] = -5.0;
        let mut s = AdamState::for_block(AdamConfig::with_lr(0.05), &p);
        for _ in 0..5 {
            adam_step(&mut p, &mut s).unwrap();
            assert_eq!(p.values[0], 1.0);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = ParamBlock::new("x", 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        p.grad = vec![1.0, -1.0, 3.0, 0.5];
        let before = p.values.clone();
        let mut s = AdamState::for_block(AdamConfig::with_lr(0.0), &p);
        for _ in 0..3 {
            adam_step(&mut p, &mut s).unwrap();
        }
        assert_eq!(p.values, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ParamBlock::zeros("x", 2, 3);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), 5);
        assert!(adam_step(&mut p, &mut s).is_err());
        assert!(ParamBlock::new("y", 2, 2, vec![0.0; 3]).is_err());
        assert!(p.accumulate(&[1.0]).is_err());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut a = ParamBlock::zeros("x", 1, 4);
        a.accumulate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        a.accumulate(&[0.5, -2.0, 0.25, 1e-3]).unwrap();
        let mut b = ParamBlock::zeros("x", 1, 4);
        b.accumulate(&[1.5, 0.0, 3.25, 4.001]).unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-12);
        }
        a.zero_grad();
        assert!(a.grad.iter().all(|&g| g == 0.0));
        assert_eq!(reduce_ordered(&[vec![1.0, 2.0], vec![3.0, 4.0]]), vec![4.0, 6.0]);
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut p = ParamBlock::new("x", 1, 4, vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        p.grad = p.values.iter().map(|x| 2.0 * x).collect();
        let r = finite_diff_check(|q| Ok(q.values.iter().map(|x| x * x).sum()), &p, 1e-4, 1e-9, None).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let p = ParamBlock::new("x", 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let r = finite_diff_check(|_| Ok(4.2), &p, 1e-4, 1e-12, None).unwrap();
        assert!(r.numeric.iter().all(|&n| n == 0.0));
        assert!(r.analytic.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn non_finite_objective_is_diagnosed() {
        let p = ParamBlock::zeros("x", 1, 1);
        let err = finite_diff_check(|_| Ok(f64::NAN), &p, 1e-4, 1e-6, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn laplacian_of_deformed_mesh_passes_check() {
        let base = make_icosphere(1, 0.4).unwrap();
        let t = RigidTransform::from_yaw_translation(0.8, Vec3::new(10.0, 2.0, 1.0));
        let mut p = ParamBlock::new(
            "displacement",
            base.vertex_count(),
            3,
            (0..base.vertex_count() * 3).map(|i| 0.02 * ((i * 37 % 11) as f64 - 5.0)).collect(),
        )
        .unwrap();
        let loss = |q: &ParamBlock| -> Result<f64> {
            let d = Displacement::from_flat(&q.values)?;
            Ok(laplacian_loss(&apply_deformation(&base, &d, &t)?))
        };
        let d = Displacement::from_flat(&p.values).unwrap();
        let local = apply_deformation(&base, &d, &RigidTransform::identity()).unwrap();
        let (_, g) = laplacian_loss_grad(&local);
        p.grad = g.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let r = finite_diff_check(loss, &p, 1e-6, 1e-4, None).unwrap();
        assert!(r.passed(), "max rel error {}", r.max_rel_error);
    }
}
