//! Central finite-difference verification of every operation's adjoint.
//!
//! Checks run in 64-bit: each differentiable input element is perturbed by
//! `±h` (`h = 1e-5`) and the numeric slope is compared against the recorded
//! backward pass. The relative error convention is
//! `|a - n| / max(|a|, |n|, 1e-8)`.
//!
//! Inputs that would sit on a non-differentiable point (ReLU kinks,
//! scatter-max ties) are resampled before checking.

use rand::RngExt;
use rand_pcg::Pcg64;

use super::{Element, Graph, Tensor, TensorRef};
use crate::rng::{indexed_rng, Stream};
use crate::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_CASES: usize = 10;
const H: f64 = 1e-5;

/// Everything `check_all` covers. "mlp2" is a composite two-layer network
/// rather than a single op; it exercises chained backward accumulation.
pub const ALL_OPS: &[&str] = &[
    "add",
    "add_broadcast",
    "mul",
    "mul_broadcast",
    "scale",
    "matmul",
    "matmul_batched",
    "conv3d",
    "conv3d_kernel_eq_stride",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "embedding",
    "scatter_max_pool",
    "scatter_rows",
    "trilinear_sample",
    "upsample_nearest2",
    "reshape",
    "permute",
    "concat",
    "masked_fill",
    "sum_all",
    "bce_with_logits",
    "cross_entropy_sum",
    "mlp2",
];

pub struct GradCheckReport {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

type LossBuilder = Box<dyn Fn(&mut Graph<f64>, &[TensorRef]) -> Result<TensorRef>>;

/// One randomized check instance: concrete input tensors plus a closure
/// that rebuilds the forward pass from fresh leaves.
struct Case {
    inputs: Vec<Tensor<f64>>,
    build: LossBuilder,
}

fn rand_vec(rng: &mut Pcg64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut Pcg64, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, -1.0, 1.0))
}

/// Random weights so the scalar loss exercises every output element with a
/// distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, out: TensorRef, weights: &Tensor<f64>) -> Result<TensorRef> {
    let w = g.constant(weights.clone())?;
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Evaluates the case loss at the given input values (forward only).
fn eval_loss(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let ids: Vec<TensorRef> = inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
    let loss = (case.build)(&mut g, &ids).unwrap();
    g.value(loss).scalar_value()
}

/// Analytic gradients for every input of the case.
fn analytic_grads(case: &Case) -> Vec<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let ids: Vec<TensorRef> = case.inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
    let loss = (case.build)(&mut g, &ids).unwrap();
    g.backward(loss).unwrap();
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            g.grad(id)
                .map(|s| s.iter().map(|&v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; case.inputs[i].numel()])
        })
        .collect()
}

/// Max relative error between analytic and central-difference gradients
/// over all inputs of the case.
fn case_max_rel_error(case: &Case) -> f64 {
    let analytic = analytic_grads(case);
    let mut max_err = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for elem in 0..grad.len() {
            let mut plus = case.inputs.to_vec();
            plus[which].data_mut()[elem] += H;
            let mut minus = case.inputs.to_vec();
            minus[which].data_mut()[elem] -= H;
            let numeric = (eval_loss(case, &plus) - eval_loss(case, &minus)) / (2.0 * H);
            let a = grad[elem];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(rel);
        }
    }
    max_err
}

fn away_from_zero(data: &[f64], margin: f64) -> bool {
    data.iter().all(|&v| v.abs() > margin)
}

/// Per-cell, per-channel top-2 gap for scatter-max tie rejection.
fn scatter_gaps_ok(feats: &Tensor<f64>, ids: &[usize], n_cells: usize, margin: f64) -> bool {
    let d = feats.shape()[1];
    let mut best = vec![f64::NEG_INFINITY; n_cells * d];
    let mut second = vec![f64::NEG_INFINITY; n_cells * d];
    for (p, &c) in ids.iter().enumerate() {
        for j in 0..d {
            let v = feats.data()[p * d + j];
            let slot = c * d + j;
            if v > best[slot] {
                second[slot] = best[slot];
                best[slot] = v;
            } else if v > second[slot] {
                second[slot] = v;
            }
        }
    }
    best.iter()
        .zip(&second)
        .all(|(&b, &s)| !s.is_finite() || (b - s) > margin)
}

fn make_case(op: &str, rng: &mut Pcg64) -> Case {
    match op {
        "add" => {
            let shape = vec![rng.random_range(2..5usize), rng.random_range(2..5usize)];
            let a = rand_tensor(rng, shape.clone());
            let b = rand_tensor(rng, shape.clone());
            let w = rand_tensor(rng, shape);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.add(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "add_broadcast" => {
            let (m, n) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
            let a = rand_tensor(rng, vec![m, n]);
            let b = rand_tensor(rng, vec![n]);
            let w = rand_tensor(rng, vec![m, n]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.add_broadcast(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "mul" => {
            let shape = vec![rng.random_range(2..5usize), rng.random_range(2..5usize)];
            let a = rand_tensor(rng, shape.clone());
            let b = rand_tensor(rng, shape.clone());
            let w = rand_tensor(rng, shape);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.mul(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "mul_broadcast" => {
            let (m, n) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
            let a = rand_tensor(rng, vec![m, n]);
            let b = rand_tensor(rng, vec![n]);
            let w = rand_tensor(rng, vec![m, n]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.mul_broadcast(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "scale" => {
            let shape = vec![rng.random_range(2..6usize)];
            let a = rand_tensor(rng, shape.clone());
            let w = rand_tensor(rng, shape);
            let c = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.scale(ids[0], c)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "matmul" => {
            let (m, k, n) = (
                rng.random_range(2..4usize),
                rng.random_range(2..4usize),
                rng.random_range(2..4usize),
            );
            let a = rand_tensor(rng, vec![m, k]);
            let b = rand_tensor(rng, vec![k, n]);
            let w = rand_tensor(rng, vec![m, n]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.matmul(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "matmul_batched" => {
            let (bt, m, k, n) = (
                2usize,
                rng.random_range(2..4usize),
                rng.random_range(2..4usize),
                rng.random_range(2..4usize),
            );
            let a = rand_tensor(rng, vec![bt, m, k]);
            let b = rand_tensor(rng, vec![bt, k, n]);
            let w = rand_tensor(rng, vec![bt, m, n]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.matmul(ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "conv3d" => {
            let (ci, co, side) = (2usize, 2usize, 5usize);
            let x = rand_tensor(rng, vec![ci, side, side, side]);
            let wt = rand_tensor(rng, vec![co, ci, 3, 3, 3]);
            let bias = rand_tensor(rng, vec![co]);
            let w = rand_tensor(rng, vec![co, side, side, side]);
            Case {
                inputs: vec![x, wt, bias],
                build: Box::new(move |g, ids| {
                    let y = g.conv3d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "conv3d_kernel_eq_stride" => {
            // The downsampling flavor: 2^3 kernel, stride 2, no padding.
            let (ci, co, side) = (2usize, 3usize, 6usize);
            let x = rand_tensor(rng, vec![ci, side, side, side]);
            let wt = rand_tensor(rng, vec![co, ci, 2, 2, 2]);
            let bias = rand_tensor(rng, vec![co]);
            let w = rand_tensor(rng, vec![co, 3, 3, 3]);
            Case {
                inputs: vec![x, wt, bias],
                build: Box::new(move |g, ids| {
                    let y = g.conv3d(ids[0], ids[1], Some(ids[2]), 2, 0)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "relu" => {
            let shape = vec![rng.random_range(3..7usize)];
            let mut a = rand_tensor(rng, shape.clone());
            while !away_from_zero(a.data(), 1e-3) {
                a = rand_tensor(rng, shape.clone());
            }
            let w = rand_tensor(rng, shape);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.relu(ids[0])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "sigmoid" => {
            let shape = vec![rng.random_range(3..7usize)];
            let a = rand_tensor(rng, shape.clone());
            let w = rand_tensor(rng, shape);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.sigmoid(ids[0])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "softmax" => {
            let shape = vec![rng.random_range(2..4usize), rng.random_range(2..6usize)];
            let a = rand_tensor(rng, shape.clone());
            let w = rand_tensor(rng, shape);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.softmax(ids[0])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "layer_norm" => {
            let shape = vec![rng.random_range(2..4usize), rng.random_range(3..6usize)];
            let a = rand_tensor(rng, shape.clone());
            let w = rand_tensor(rng, shape);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.layer_norm(ids[0], 1e-5)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "embedding" => {
            let (v, d, n) = (rng.random_range(3..6usize), rng.random_range(2..4usize), 5usize);
            let table = rand_tensor(rng, vec![v, d]);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            let w = rand_tensor(rng, vec![n, d]);
            Case {
                inputs: vec![table],
                build: Box::new(move |g, tids| {
                    let y = g.embedding(tids[0], &ids)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "scatter_max_pool" => {
            // 10 points into 2^3 cells, resampled away from ties.
            let (n, d, cells) = (10usize, 3usize, 8usize);
            let mut feats = rand_tensor(rng, vec![n, d]);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..cells)).collect();
            while !scatter_gaps_ok(&feats, &ids, cells, 1e-3) {
                feats = rand_tensor(rng, vec![n, d]);
            }
            let w = rand_tensor(rng, vec![cells, d]);
            Case {
                inputs: vec![feats],
                build: Box::new(move |g, tids| {
                    let y = g.scatter_max_pool(tids[0], &ids, cells)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "scatter_rows" => {
            let (m, d, k) = (6usize, 3usize, 3usize);
            let base = rand_tensor(rng, vec![m, d]);
            let rows = rand_tensor(rng, vec![k, d]);
            let mut ids: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                ids.swap(i, rng.random_range(0..=i));
            }
            ids.truncate(k);
            let w = rand_tensor(rng, vec![m, d]);
            Case {
                inputs: vec![base, rows],
                build: Box::new(move |g, tids| {
                    let y = g.scatter_rows(tids[0], &ids, tids[1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "trilinear_sample" => {
            let (c, gres, t) = (2usize, 3usize, 6usize);
            let grid = rand_tensor(rng, vec![c, gres, gres, gres]);
            let points: Vec<[f64; 3]> = (0..t)
                .map(|_| {
                    [
                        rng.random_range(0.0..0.999),
                        rng.random_range(0.0..0.999),
                        rng.random_range(0.0..0.999),
                    ]
                })
                .collect();
            let w = rand_tensor(rng, vec![t, c]);
            Case {
                inputs: vec![grid],
                build: Box::new(move |g, tids| {
                    let y = g.trilinear_sample(tids[0], &points)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "upsample_nearest2" => {
            let (c, side) = (2usize, 2usize);
            let a = rand_tensor(rng, vec![c, side, side, side]);
            let w = rand_tensor(rng, vec![c, side * 2, side * 2, side * 2]);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.upsample_nearest2(ids[0])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "reshape" => {
            let (m, n) = (rng.random_range(2..4usize), 4usize);
            let a = rand_tensor(rng, vec![m, n]);
            let w = rand_tensor(rng, vec![m * 2, n / 2]);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let shape = w.shape().to_vec();
                    let y = g.reshape(ids[0], shape)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "permute" => {
            let shape = vec![2usize, 3, 4];
            let a = rand_tensor(rng, shape);
            let w = rand_tensor(rng, vec![4, 2, 3]);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.permute(ids[0], &[2, 0, 1])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "concat" => {
            let (m, n1, n2) = (3usize, rng.random_range(1..3usize), rng.random_range(1..3usize));
            let a = rand_tensor(rng, vec![m, n1]);
            let b = rand_tensor(rng, vec![m, n2]);
            let w = rand_tensor(rng, vec![m, n1 + n2]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let y = g.concat(&[ids[0], ids[1]], 1)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "masked_fill" => {
            let n = 8usize;
            let a = rand_tensor(rng, vec![n]);
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let w = rand_tensor(rng, vec![n]);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| {
                    let y = g.masked_fill(ids[0], &mask, -5.0)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "sum_all" => {
            let n = rng.random_range(3..7usize);
            let a = rand_tensor(rng, vec![n]);
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| g.sum_all(ids[0])),
            }
        }
        "bce_with_logits" => {
            let n = rng.random_range(3..7usize);
            let a = rand_tensor(rng, vec![n]);
            let targets: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| g.bce_with_logits(ids[0], &targets)),
            }
        }
        "cross_entropy_sum" => {
            let (n, c) = (rng.random_range(3..6usize), rng.random_range(2..5usize));
            let a = rand_tensor(rng, vec![n, c]);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            Case {
                inputs: vec![a],
                build: Box::new(move |g, ids| g.cross_entropy_sum(ids[0], &targets, &mask)),
            }
        }
        "mlp2" => {
            // Random two-layer MLP: x @ W1 + b1, relu, @ W2 + b2.
            let (n, d_in, d_h, d_out) = (3usize, 4usize, 5usize, 2usize);
            let x = rand_tensor(rng, vec![n, d_in]);
            let w1 = rand_tensor(rng, vec![d_in, d_h]);
            let b1 = rand_tensor(rng, vec![d_h]);
            let w2 = rand_tensor(rng, vec![d_h, d_out]);
            let b2 = rand_tensor(rng, vec![d_out]);
            let w = rand_tensor(rng, vec![n, d_out]);
            // Keep pre-activations away from the ReLU kink so the finite
            // difference stays valid.
            let pre_ok = |x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>| {
                let mut ok = true;
                for i in 0..n {
                    for j in 0..d_h {
                        let mut acc = b1.data()[j];
                        for p in 0..d_in {
                            acc += x.data()[i * d_in + p] * w1.data()[p * d_h + j];
                        }
                        ok &= acc.abs() > 1e-3;
                    }
                }
                ok
            };
            let (mut x, mut w1, mut b1) = (x, w1, b1);
            while !pre_ok(&x, &w1, &b1) {
                x = rand_tensor(rng, vec![n, d_in]);
                w1 = rand_tensor(rng, vec![d_in, d_h]);
                b1 = rand_tensor(rng, vec![d_h]);
            }
            Case {
                inputs: vec![x, w1, b1, w2, b2],
                build: Box::new(move |g, ids| {
                    let h = g.linear(ids[0], ids[1], ids[2])?;
                    let h = g.relu(h)?;
                    let y = g.linear(h, ids[3], ids[4])?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        other => panic!("unknown grad-check op `{other}`"),
    }
}

/// Checks one op kind over `cases` random instances.
pub fn check_op(op: &str, tolerance: f64, cases: usize, seed: u64) -> GradCheckReport {
    let mut max_err = 0.0f64;
    for i in 0..cases {
        let mut rng = indexed_rng(seed, Stream::Init, (i as u64) << 8 | hash_op(op));
        let case = make_case(op, &mut rng);
        max_err = max_err.max(case_max_rel_error(&case));
    }
    GradCheckReport {
        op: op.to_string(),
        cases,
        max_rel_error: max_err,
        pass: max_err < tolerance,
    }
}

/// Checks every op kind; never aborts, failures are reported in the result.
pub fn check_all(tolerance: f64, cases: usize, seed: u64) -> Vec<GradCheckReport> {
    ALL_OPS.iter().map(|op| check_op(op, tolerance, cases, seed)).collect()
}

fn hash_op(op: &str) -> u64 {
    op.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)) & 0xff
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_is_exact() {
        let r = check_op("add", 1e-9, 3, 7);
        assert!(r.pass, "max err {}", r.max_rel_error);
    }

    #[test]
    fn conv3d_small_kernel_passes() {
        let r = check_op("conv3d_kernel_eq_stride", DEFAULT_TOLERANCE, 2, 11);
        assert!(r.pass, "max err {}", r.max_rel_error);
    }

    #[test]
    fn scatter_max_pool_passes_away_from_ties() {
        let r = check_op("scatter_max_pool", DEFAULT_TOLERANCE, 3, 3);
        assert!(r.pass, "max err {}", r.max_rel_error);
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let r = check_op("mlp2", DEFAULT_TOLERANCE, 3, 5);
        assert!(r.pass, "max err {}", r.max_rel_error);
    }
}
