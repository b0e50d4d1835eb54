//! PointNet-style per-point car/background segmentation.
//!
//! Encoder `3 → h → h` applied per point, max-pool over points to a global
//! feature, then a per-point classifier on `[point feature, global feature]`
//! `2h → h → 2`. Leaky-ReLU everywhere except the logits. Logit order is
//! `(not car, car)`.

use rand::Rng;

use crate::diffcore::ParamBlock;
use crate::Vec3;

const LEAK: f64 = 0.01;
/// Points are scaled by this factor before the first layer.
pub const INPUT_SCALE: f64 = 0.25;

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

fn lrelu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// Block order inside [`SegNet::blocks`].
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 4;
const B3: usize = 5;
const W4: usize = 6;
const B4: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub hidden: usize,
    pub blocks: Vec<ParamBlock>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct SegForward {
    inputs: Vec<[f64; 3]>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    global: Vec<f64>,
    argmax: Vec<usize>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    pub logits: Vec<[f64; 2]>,
}

/// out[o] = b[o] + Σ_i w[o, i] x[i]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *slot = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl SegNet {
    /// He-uniform weights, zero biases.
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        let mut layer = |name: &str, out: usize, inp: usize| {
            let bound = (6.0 / inp as f64).sqrt();
            let w: Vec<f64> = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
            [
                ParamBlock::new(format!("seg.{name}.w"), out, inp, w).expect("shape"),
                ParamBlock::zeros(format!("seg.{name}.b"), out, 1),
            ]
        };
        let mut blocks = Vec::with_capacity(8);
        blocks.extend(layer("enc1", hidden, 3));
        blocks.extend(layer("enc2", hidden, hidden));
        blocks.extend(layer("cls1", hidden, 2 * hidden));
        blocks.extend(layer("cls2", 2, hidden));
        SegNet { hidden, blocks }
    }

    /// Zeroed gradient buffers shaped like [`SegNet::blocks`].
    pub fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| vec![0.0; b.len()]).collect()
    }

    pub fn forward(&self, points: &[Vec3]) -> SegForward {
        let h = self.hidden;
        let n = points.len();
        let v = |i: usize| &self.blocks[i].values[..];
        let inputs: Vec<[f64; 3]> = points
            .iter()
            .map(|p| [p.x * INPUT_SCALE, p.y * INPUT_SCALE, p.z * INPUT_SCALE])
            .collect();
        let mut z1 = vec![0.0; n * h];
        let mut z2 = vec![0.0; n * h];
        for i in 0..n {
            affine(v(W1), v(B1), &inputs[i], &mut z1[i * h..(i + 1) * h]);
        }
        let a1: Vec<f64> = z1.iter().map(|&x| lrelu(x)).collect();
        for i in 0..n {
            affine(v(W2), v(B2), &a1[i * h..(i + 1) * h], &mut z2[i * h..(i + 1) * h]);
        }
        let a2: Vec<f64> = z2.iter().map(|&x| lrelu(x)).collect();

        let mut global = vec![f64::NEG_INFINITY; h];
        let mut argmax = vec![0usize; h];
        for i in 0..n {
            for c in 0..h {
                if a2[i * h + c] > global[c] {
                    global[c] = a2[i * h + c];
                    argmax[c] = i;
                }
            }
        }
        if n == 0 {
            global.iter_mut().for_each(|g| *g = 0.0);
        }

        let mut z3 = vec![0.0; n * h];
        let mut concat = vec![0.0; 2 * h];
        concat[h..].copy_from_slice(&global);
        for i in 0..n {
            concat[..h].copy_from_slice(&a2[i * h..(i + 1) * h]);
            affine(v(W3), v(B3), &concat, &mut z3[i * h..(i + 1) * h]);
        }
        let a3: Vec<f64> = z3.iter().map(|&x| lrelu(x)).collect();
        let mut logits = vec![[0.0; 2]; n];
        for i in 0..n {
            affine(v(W4), v(B4), &a3[i * h..(i + 1) * h], &mut logits[i]);
        }
        SegForward {
            inputs,
            z1,
            a1,
            z2,
            a2,
            global,
            argmax,
            z3,
            a3,
            logits,
        }
    }

    /// Backpropagates `dlogits` (one pair per point). Returns gradients with
    /// respect to the input points; accumulates weight gradients into
    /// `weight_grads` when given.
    pub fn backward(&self, fwd: &SegForward, dlogits: &[[f64; 2]], mut weight_grads: Option<&mut [Vec<f64>]>) -> Vec<Vec3> {
        let h = self.hidden;
        let n = fwd.logits.len();
        assert_eq!(dlogits.len(), n, "one logit gradient per point");
        let v = |i: usize| &self.blocks[i].values[..];
        let mut da2 = vec![0.0; n * h];
        let mut dglobal = vec![0.0; h];
        let mut active = vec![false; n];
        let mut concat = vec![0.0; 2 * h];
        concat[h..].copy_from_slice(&fwd.global);

        for i in 0..n {
            let dl = dlogits[i];
            if dl[0] == 0.0 && dl[1] == 0.0 {
                continue;
            }
            active[i] = true;
            let a3 = &fwd.a3[i * h..(i + 1) * h];
            let mut dz3 = vec![0.0; h];
            for c in 0..h {
                let da3 = v(W4)[c] * dl[0] + v(W4)[h + c] * dl[1];
                dz3[c] = da3 * lrelu_grad(fwd.z3[i * h + c]);
            }
            if let Some(g) = weight_grads.as_deref_mut() {
                for o in 0..2 {
                    for c in 0..h {
                        g[W4][o * h + c] += dl[o] * a3[c];
                    }
                    g[B4][o] += dl[o];
                }
                concat[..h].copy_from_slice(&fwd.a2[i * h..(i + 1) * h]);
                for o in 0..h {
                    if dz3[o] == 0.0 {
                        continue;
                    }
                    let row = &mut g[W3][o * 2 * h..(o + 1) * 2 * h];
                    for (r, x) in row.iter_mut().zip(&concat) {
                        *r += dz3[o] * x;
                    }
                    g[B3][o] += dz3[o];
                }
            }
            let w3 = v(W3);
            for o in 0..h {
                let d = dz3[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w3[o * 2 * h..(o + 1) * 2 * h];
                for c in 0..h {
                    da2[i * h + c] += row[c] * d;
                    dglobal[c] += row[h + c] * d;
                }
            }
        }
        for c in 0..h {
            if n > 0 && dglobal[c] != 0.0 {
                let i = fwd.argmax[c];
                da2[i * h + c] += dglobal[c];
                active[i] = true;
            }
        }

        let mut dinputs = vec![Vec3::zeros(); n];
        let w2 = v(W2);
        let w1 = v(W1);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let dz2: Vec<f64> = (0..h).map(|c| da2[i * h + c] * lrelu_grad(fwd.z2[i * h + c])).collect();
            let mut da1 = vec![0.0; h];
            for o in 0..h {
                if dz2[o] == 0.0 {
                    continue;
                }
                let row = &w2[o * h..(o + 1) * h];
                for c in 0..h {
                    da1[c] += row[c] * dz2[o];
                }
            }
            let dz1: Vec<f64> = (0..h).map(|c| da1[c] * lrelu_grad(fwd.z1[i * h + c])).collect();
            let mut dx = [0.0; 3];
            for o in 0..h {
                for k in 0..3 {
                    dx[k] += w1[o * 3 + k] * dz1[o];
                }
            }
            dinputs[i] = Vec3::new(dx[0], dx[1], dx[2]) * INPUT_SCALE;
            if let Some(g) = weight_grads.as_deref_mut() {
                let a1 = &fwd.a1[i * h..(i + 1) * h];
                for o in 0..h {
                    if dz2[o] != 0.0 {
                        let row = &mut g[W2][o * h..(o + 1) * h];
                        for (r, x) in row.iter_mut().zip(a1) {
                            *r += dz2[o] * x;
                        }
                        g[B2][o] += dz2[o];
                    }
                    if dz1[o] != 0.0 {
                        for k in 0..3 {
                            g[W1][o * 3 + k] += dz1[o] * fwd.inputs[i][k];
                        }
                        g[B1][o] += dz1[o];
                    }
                }
            }
        }
        dinputs
    }
}

/// Softmax probability of the car class for one logit pair.
pub fn car_probability(l: &[f64; 2]) -> f64 {
    1.0 / (1.0 + (l[0] - l[1]).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn shapes_and_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SegNet::new(8, &mut rng);
        assert_eq!(net.forward(&cloud(&mut rng, 5)).logits.len(), 5);
        assert!(net.forward(&[]).logits.is_empty());
    }

    #[test]
    fn duplicate_and_permutation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SegNet::new(16, &mut rng);
        let mut pts = cloud(&mut rng, 12);
        pts.push(pts[3]);
        let out = net.forward(&pts).logits;
        assert_eq!(out[3], out[12]);
        let perm: Vec<usize> = (0..pts.len()).rev().collect();
        let shuffled: Vec<Vec3> = perm.iter().map(|&i| pts[i]).collect();
        let out2 = net.forward(&shuffled).logits;
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out2[k], out[i]);
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = SegNet::new(16, &mut rng);
        let pts = cloud(&mut rng, 10);
        let dl: Vec<[f64; 2]> = (0..10).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let objective = |p: &[Vec3]| -> f64 {
            net.forward(p)
                .logits
                .iter()
                .zip(&dl)
                .map(|(l, d)| l[0] * d[0] + l[1] * d[1])
                .sum()
        };
        let fwd = net.forward(&pts);
        let g = net.backward(&fwd, &dl, None);
        let mut block = ParamBlock::new("pts", 10, 3, pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap();
        block.grad = g.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let report = finite_diff_check(
            |b| {
                let p: Vec<Vec3> = b.values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
                Ok(objective(&p))
            },
            &block,
            1e-6,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SegNet::new(6, &mut rng);
        let pts = cloud(&mut rng, 7);
        let dl: Vec<[f64; 2]> = (0..7).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let fwd = net.forward(&pts);
        let mut grads = net.grad_buffers();
        net.backward(&fwd, &dl, Some(&mut grads));
        for bi in 0..net.blocks.len() {
            let mut block = net.blocks[bi].clone();
            block.grad = grads[bi].clone();
            let report = finite_diff_check(
                |b| {
                    let mut n2 = net.clone();
                    n2.blocks[bi].values = b.values.clone();
                    Ok(n2
                        .forward(&pts)
                        .logits
                        .iter()
                        .zip(&dl)
                        .map(|(l, d)| l[0] * d[0] + l[1] * d[1])
                        .sum())
                },
                &block,
                1e-6,
                1e-5,
                None,
            )
            .unwrap();
            assert!(report.passed(), "block {} rel {}", net.blocks[bi].name, report.max_rel_error);
        }
    }

    #[test]
    fn car_probability_is_softmax() {
        assert_eq!(car_probability(&[0.0, 0.0]), 0.5);
        assert!(car_probability(&[10.0, -10.0]) < 1e-8);
        let l: [f64; 2] = [0.3, 1.2];
        let e = [l[0].exp(), l[1].exp()];
        assert!((car_probability(&l) - e[1] / (e[0] + e[1])).abs() < 1e-15);
    }
}
