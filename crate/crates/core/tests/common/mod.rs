//! Shared helpers for the integration suites: deterministic rngs, random
//! tensors, naive oracles, and a finite-difference harness for tape ops.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rafl::autodiff::{rel_err, Tape, ValueId};
use rafl::tensor::Tensor;

pub fn trng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).expect("test tensor")
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        rel_err(a, b, 1e-12) < tol,
        "{what}: {a} vs {b} (rel err {})",
        rel_err(a, b, 1e-12)
    );
}

pub fn assert_abs(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() < tol, "{what}: {a} vs {b} (abs err {})", (a - b).abs());
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// naive oracles

/// Plain three-loop 2-D matmul.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Row softmax with max subtraction, optional additive bias per column.
pub fn naive_softmax_row(row: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let shifted: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(j, &x)| x + bias.map_or(0.0, |b| b[j]))
        .collect();
    let max = shifted.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = shifted.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Biased-variance layer norm over one row.
pub fn naive_layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, &x)| gamma[j] * (x - mean) * inv + beta[j])
        .collect()
}

/// Single-head attention oracle: softmax(q kT / sqrt(d_k) + bias) v over 2-D
/// inputs [s, d_k], bias per key.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d_k: usize,
    d_v: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut raw = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for p in 0..d_k {
                acc += q[i * d_k + p] * k[j * d_k + p];
            }
            raw[i * s + j] = acc * scale;
        }
    }
    let mut probs = vec![0.0; s * s];
    for i in 0..s {
        let p = naive_softmax_row(&raw[i * s..(i + 1) * s], bias);
        probs[i * s..(i + 1) * s].copy_from_slice(&p);
    }
    let ctx = naive_matmul(&probs, v, s, s, d_v);
    (raw, probs, ctx)
}

// ---------------------------------------------------------------------------
// finite-difference harness for tape ops

/// Check tape gradients of a scalar-valued graph against central differences
/// on every element of every input. `build` receives leaves in input order
/// and returns the scalar loss node.
pub fn fd_check(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    what: &str,
    build: &dyn Fn(&mut Tape, &[ValueId]) -> rafl::Result<ValueId>,
) {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids).expect("fd_check build");
        let v = tape.value(loss);
        assert_eq!(v.numel(), 1, "{what}: loss is not scalar");
        v.data()[0]
    };
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids).expect("fd_check build");
    let grads = tape.backward(loss).expect("fd_check backward");
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[j]);
            let err = rel_err(a, fd, 1e-5);
            assert!(
                err < tol,
                "{what}: input {i} element {j}: analytic {a} vs fd {fd} (rel err {err})"
            );
        }
    }
}

/// Reduce an arbitrary tensor node to a scalar with fixed pseudo-random
/// weights so every output element influences the loss.
pub fn weighted_sum(tape: &mut Tape, x: ValueId, seed: u64) -> rafl::Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = trng(seed);
    let w = rand_t(&mut rng, &shape, 1.0);
    let wid = tape.leaf(w);
    let prod = tape.mul(x, wid)?;
    Ok(tape.sum(prod))
}

/// Full multi-head attention in plain loops: per-head projections, scaled
/// dot attention, concat, then the output projection.
#[allow(clippy::too_many_arguments)]
pub fn naive_multi_head(
    x: &[f64],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[f64],
    s: usize,
    hidden: usize,
    d_k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let heads = wq.len();
    let mut concat = vec![0.0; s * hidden];
    for h in 0..heads {
        let qp = naive_matmul(x, &wq[h], s, hidden, d_k);
        let kp = naive_matmul(x, &wk[h], s, hidden, d_k);
        let vp = naive_matmul(x, &wv[h], s, hidden, d_k);
        let (_, _, ctx) = naive_attention(&qp, &kp, &vp, s, d_k, d_k, bias);
        for i in 0..s {
            for j in 0..d_k {
                concat[i * hidden + h * d_k + j] = ctx[i * d_k + j];
            }
        }
    }
    naive_matmul(&concat, wo, s, hidden, hidden)
}

pub fn naive_gelu(x: f64) -> f64 {
    x * rafl::autodiff::gauss_cdf(x)
}
