//! Tensor and tape-op tests: frozen high-precision oracles, naive
//! re-implementations, and finite-difference gradient checks per op.

mod common;

use common::*;
use proptest::prelude::*;

use rafl::autodiff::{finite_difference, gauss_cdf, rel_err, Tape, MASK_BIAS};
use rafl::tensor::{matmul, transpose_last2, Tensor};
use rafl::Error;

// ---------------------------------------------------------------------------
// tensor basics

#[test]
fn tensor_new_validates() {
    assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::Shape { .. })));
    assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape { .. })));
    assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
}

#[test]
fn matmul_matches_naive_2d() {
    let mut rng = trng(1);
    let a = rand_t(&mut rng, &[4, 3], 1.0);
    let b = rand_t(&mut rng, &[3, 5], 1.0);
    let c = matmul(&a, &b).unwrap();
    let oracle = naive_matmul(a.data(), b.data(), 4, 3, 5);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert_close(*x, *y, 1e-13, "matmul vs naive");
    }
}

#[test]
fn matmul_broadcasts_batches() {
    let mut rng = trng(2);
    let a = rand_t(&mut rng, &[2, 3, 4], 1.0);
    let b = rand_t(&mut rng, &[4, 5], 1.0);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 5]);
    for batch in 0..2 {
        let oracle = naive_matmul(&a.data()[batch * 12..(batch + 1) * 12], b.data(), 3, 4, 5);
        for (j, y) in oracle.iter().enumerate() {
            assert_close(c.data()[batch * 15 + j], *y, 1e-13, "batched matmul");
        }
    }
    // Left side broadcast too.
    let a1 = rand_t(&mut rng, &[3, 4], 1.0);
    let b2 = rand_t(&mut rng, &[2, 4, 5], 1.0);
    let c2 = matmul(&a1, &b2).unwrap();
    assert_eq!(c2.shape(), &[2, 3, 5]);
    for batch in 0..2 {
        let oracle = naive_matmul(a1.data(), &b2.data()[batch * 20..(batch + 1) * 20], 3, 4, 5);
        for (j, y) in oracle.iter().enumerate() {
            assert_close(c2.data()[batch * 15 + j], *y, 1e-13, "broadcast matmul");
        }
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
}

#[test]
fn transpose_round_trips() {
    let mut rng = trng(3);
    let a = rand_t(&mut rng, &[2, 3, 4], 1.0);
    let t = transpose_last2(&a).unwrap();
    assert_eq!(t.shape(), &[2, 4, 3]);
    assert_eq!(t.at(&[1, 2, 0]), a.at(&[1, 0, 2]));
    let back = transpose_last2(&t).unwrap();
    assert!(back.bits_eq(&a));
}

// ---------------------------------------------------------------------------
// forward-value oracles

// softmax([0.5, -0.3, 2.0]) from a 50-digit exponential computation.
const SOFTMAX_ORACLE: [f64; 3] =
    [0.16860511874869749892, 0.075759163352213383882, 0.7556357178990891172];

#[test]
fn softmax_matches_high_precision_oracle() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -0.3, 2.0]).unwrap());
    let y = tape.softmax_rows(x, None).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(SOFTMAX_ORACLE) {
        assert!(rel_err(*a, b, 1e-300) < 1e-12, "softmax oracle: {a} vs {b}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 2..24)) {
        let n = vals.len();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, n], vals).unwrap());
        let y = tape.softmax_rows(x, None).unwrap();
        let row = tape.value(y).data();
        let sum: f64 = row.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn softmax_mask_removes_keys_entirely() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 4], vec![0.3, 1.0, -0.5, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let bias = Tensor::new(vec![1, 4], vec![0.0, MASK_BIAS, 0.0, MASK_BIAS]).unwrap();
    let y = tape.softmax_rows(x, Some(&bias)).unwrap();
    let out = tape.value(y);
    for r in 0..2 {
        assert_eq!(out.data()[r * 4 + 1], 0.0, "masked key carries zero mass");
        assert_eq!(out.data()[r * 4 + 3], 0.0);
        let sum: f64 = out.data()[r * 4..(r + 1) * 4].iter().sum();
        assert_abs(sum, 1.0, 1e-12, "masked row still normalized");
    }
}

// gelu(1) = Phi(1) from a 50-digit normal-CDF computation.
const GELU_AT_ONE: f64 = 0.84134474606854294859;

#[test]
fn gelu_matches_oracle_and_reflection() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, -1.0]).unwrap());
    let y = tape.gelu(x);
    let out = tape.value(y).data().to_vec();
    assert_eq!(out[0], 0.0);
    assert_abs(out[1], GELU_AT_ONE, 1e-15, "gelu(1)");
    // x * Phi(x) - (-x) * Phi(-x) = x.
    for &v in &[0.1, 0.7, 1.3, 2.9] {
        let g = |t: f64| t * gauss_cdf(t);
        assert_abs(g(v) - g(-v), v, 1e-12, "gelu reflection");
    }
    assert_abs(gauss_cdf(0.0), 0.5, 1e-15, "Phi(0)");
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.5, 3.0]);
}

#[test]
fn layer_norm_matches_hand_composition() {
    let mut rng = trng(4);
    let x = rand_t(&mut rng, &[3, 8], 2.0);
    let gamma = rand_t(&mut rng, &[8], 1.0);
    let beta = rand_t(&mut rng, &[8], 1.0);
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.leaf(x.clone()), tape.leaf(gamma.clone()), tape.leaf(beta.clone()));
    let y = tape.layer_norm(xi, gi, bi, 1e-12).unwrap();
    let out = tape.value(y);
    for r in 0..3 {
        let oracle = naive_layer_norm_row(&x.data()[r * 8..(r + 1) * 8], gamma.data(), beta.data(), 1e-12);
        for (j, o) in oracle.iter().enumerate() {
            assert_close(out.data()[r * 8 + j], *o, 1e-12, "layer_norm vs naive");
        }
    }
}

#[test]
fn layer_norm_unit_params_standardizes_rows() {
    let mut rng = trng(5);
    let x = rand_t(&mut rng, &[4, 16], 3.0);
    let mut tape = Tape::new();
    let xi = tape.leaf(x);
    let gi = tape.leaf(Tensor::full(&[16], 1.0));
    let bi = tape.leaf(Tensor::zeros(&[16]));
    let y = tape.layer_norm(xi, gi, bi, 1e-12).unwrap();
    let out = tape.value(y);
    for r in 0..4 {
        let row = &out.data()[r * 16..(r + 1) * 16];
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert_abs(mean, 0.0, 1e-12, "ln mean");
        assert_abs(var, 1.0, 1e-9, "ln var");
    }
}

#[test]
fn layer_norm_rejects_bad_eps() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 4]));
    let g = tape.leaf(Tensor::full(&[4], 1.0));
    let b = tape.leaf(Tensor::zeros(&[4]));
    assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Config(_))));
}

#[test]
fn dropout_identity_paths_add_no_node_and_draw_nothing() {
    let mut rng = trng(6);
    let x = rand_t(&mut rng, &[4, 4], 1.0);
    let mut tape = Tape::new();
    let xi = tape.leaf(x);
    let before_len = tape.len();
    let mut d_rng = trng(7);
    let probe = d_rng.clone();
    let y0 = tape.dropout(xi, 0.0, true, &mut d_rng).unwrap();
    let y1 = tape.dropout(xi, 0.5, false, &mut d_rng).unwrap();
    assert_eq!(y0.index(), xi.index(), "rate 0 is the identity node");
    assert_eq!(y1.index(), xi.index(), "eval mode is the identity node");
    assert_eq!(tape.len(), before_len, "no nodes appended");
    assert_eq!(d_rng.get_word_pos(), probe.get_word_pos(), "no rng draws consumed");
}

#[test]
fn dropout_training_scales_survivors() {
    let mut rng = trng(8);
    let x = rand_t(&mut rng, &[64, 64], 1.0);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone());
    let mut d_rng = trng(9);
    let y = tape.dropout(xi, 0.25, true, &mut d_rng).unwrap();
    let out = tape.value(y);
    let mut zeros = 0usize;
    for (a, b) in out.data().iter().zip(x.data()) {
        if *a == 0.0 {
            zeros += 1;
        } else {
            assert_close(*a, b / 0.75, 1e-12, "inverted dropout scaling");
        }
    }
    let frac = zeros as f64 / 4096.0;
    assert!((frac - 0.25).abs() < 0.03, "dropout rate {frac} far from 0.25");
    assert!(matches!(tape.dropout(xi, 1.0, true, &mut d_rng), Err(Error::Config(_))));
}

#[test]
fn cross_entropy_uniform_row_is_ln_vocab() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[1, 32]));
    let ce = tape.cross_entropy_sum(logits, &[13]).unwrap();
    let ln32 = 3.4657359027997265471;
    assert!(rel_err(tape.value(ce).data()[0], ln32, 1e-300) < 1e-12);
}

// Mean cross-entropy of the synthetic 5x8 logit grid below, labels
// [3,0,7,2,5], from a 50-digit computation.
const CE_ORACLE_MEAN: f64 = 2.4452834703899048257;

#[test]
fn cross_entropy_matches_high_precision_oracle() {
    let mut data = Vec::with_capacity(40);
    for i in 0..5usize {
        for j in 0..8usize {
            let t = i * 8 + j;
            data.push(t as f64 * 0.13 - 0.4 * (t % 5) as f64);
        }
    }
    let labels = [3usize, 0, 7, 2, 5];
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![5, 8], data).unwrap());
    let ce = tape.cross_entropy_sum(logits, &labels).unwrap();
    let mean = tape.value(ce).data()[0] / 5.0;
    assert!(
        rel_err(mean, CE_ORACLE_MEAN, 1e-300) < 1e-12,
        "cross-entropy oracle: {mean} vs {CE_ORACLE_MEAN}"
    );
}

#[test]
fn cross_entropy_rejects_out_of_range_labels() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 8]));
    assert!(matches!(tape.cross_entropy_sum(logits, &[0, 8]), Err(Error::Data(_))));
    assert!(matches!(tape.cross_entropy_sum(logits, &[0]), Err(Error::Shape { .. })));
}

#[test]
fn gather_rows_picks_and_validates() {
    let mut tape = Tape::new();
    let table = tape.leaf(Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let picked = tape.gather_rows(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(picked).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    assert!(matches!(tape.gather_rows(table, &[3]), Err(Error::Data(_))));
    assert!(matches!(tape.gather_rows(table, &[]), Err(Error::Data(_))));
}

#[test]
fn concat_cols_stitches_heads() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
    let y = tape.concat_cols(&[a, b]).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 3]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
}

#[test]
fn reshape_preserves_data_and_checks_numel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = tape.reshape(x, &[3, 2]).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
    assert!(matches!(tape.reshape(x, &[4, 2]), Err(Error::Shape { .. })));
}

#[test]
fn mask_bias_is_minus_1e9() {
    assert_eq!(MASK_BIAS, -1e9);
}

// ---------------------------------------------------------------------------
// backward

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn fanout_gradients_accumulate() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.add(x, x).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn finite_difference_helper_matches_analytic_square() {
    let f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let x = [0.5, -1.25, 2.0];
    let g = finite_difference(f, &x, 1e-6);
    for (gi, xi) in g.iter().zip(&x) {
        assert_close(*gi, 2.0 * xi, 1e-8, "fd of x^2");
    }
}

const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-6;

#[test]
fn fd_matmul_2d_and_batched() {
    let mut rng = trng(10);
    let a = rand_t(&mut rng, &[3, 4], 1.0);
    let b = rand_t(&mut rng, &[4, 2], 1.0);
    fd_check(&[a, b], FD_H, FD_TOL, "matmul 2d", &|tape, ids| {
        let y = tape.matmul(ids[0], ids[1])?;
        weighted_sum(tape, y, 100)
    });
    let a3 = rand_t(&mut rng, &[2, 3, 4], 1.0);
    let b2 = rand_t(&mut rng, &[4, 2], 1.0);
    fd_check(&[a3, b2], FD_H, FD_TOL, "matmul broadcast", &|tape, ids| {
        let y = tape.matmul(ids[0], ids[1])?;
        weighted_sum(tape, y, 101)
    });
}

#[test]
fn fd_matmul_same_tensor_both_sides() {
    let mut rng = trng(11);
    let a = rand_t(&mut rng, &[3, 3], 1.0);
    fd_check(&[a], FD_H, FD_TOL, "matmul a*a", &|tape, ids| {
        let y = tape.matmul(ids[0], ids[0])?;
        weighted_sum(tape, y, 102)
    });
}

#[test]
fn fd_transpose_through_matmul() {
    let mut rng = trng(12);
    let a = rand_t(&mut rng, &[3, 4], 1.0);
    fd_check(&[a], FD_H, FD_TOL, "transpose", &|tape, ids| {
        let t = tape.transpose(ids[0])?;
        weighted_sum(tape, t, 103)
    });
}

#[test]
fn fd_add_same_shape_and_row_bias() {
    let mut rng = trng(13);
    let a = rand_t(&mut rng, &[3, 4], 1.0);
    let b = rand_t(&mut rng, &[3, 4], 1.0);
    fd_check(&[a.clone(), b], FD_H, FD_TOL, "add same shape", &|tape, ids| {
        let y = tape.add(ids[0], ids[1])?;
        weighted_sum(tape, y, 104)
    });
    let bias = rand_t(&mut rng, &[4], 1.0);
    fd_check(&[a, bias], FD_H, FD_TOL, "add row bias", &|tape, ids| {
        let y = tape.add(ids[0], ids[1])?;
        weighted_sum(tape, y, 105)
    });
}

#[test]
fn fd_mul_and_scale() {
    let mut rng = trng(14);
    let a = rand_t(&mut rng, &[2, 5], 1.0);
    let b = rand_t(&mut rng, &[2, 5], 1.0);
    fd_check(&[a.clone(), b], FD_H, FD_TOL, "mul", &|tape, ids| {
        let y = tape.mul(ids[0], ids[1])?;
        weighted_sum(tape, y, 106)
    });
    fd_check(&[a], FD_H, FD_TOL, "scale", &|tape, ids| {
        let y = tape.scale(ids[0], -1.7);
        weighted_sum(tape, y, 107)
    });
}

#[test]
fn fd_softmax_with_and_without_mask() {
    let mut rng = trng(15);
    let x = rand_t(&mut rng, &[3, 5], 2.0);
    fd_check(&[x.clone()], FD_H, FD_TOL, "softmax", &|tape, ids| {
        let y = tape.softmax_rows(ids[0], None)?;
        weighted_sum(tape, y, 108)
    });
    fd_check(&[x], FD_H, FD_TOL, "softmax masked", &|tape, ids| {
        let bias = Tensor::new(vec![1, 5], vec![0.0, MASK_BIAS, 0.0, 0.0, MASK_BIAS]).unwrap();
        let y = tape.softmax_rows(ids[0], Some(&bias))?;
        weighted_sum(tape, y, 109)
    });
}

#[test]
fn fd_layer_norm_all_inputs() {
    let mut rng = trng(16);
    let x = rand_t(&mut rng, &[3, 6], 2.0);
    let gamma = rand_t(&mut rng, &[6], 1.0);
    let beta = rand_t(&mut rng, &[6], 1.0);
    fd_check(&[x, gamma, beta], FD_H, FD_TOL, "layer_norm", &|tape, ids| {
        let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-12)?;
        weighted_sum(tape, y, 110)
    });
}

#[test]
fn fd_gelu_and_relu() {
    // Keep relu probes away from the kink at 0.
    let x = Tensor::new(vec![1, 6], vec![-2.1, -0.9, -0.3, 0.4, 1.2, 2.6]).unwrap();
    fd_check(&[x.clone()], FD_H, FD_TOL, "gelu", &|tape, ids| {
        let y = tape.gelu(ids[0]);
        weighted_sum(tape, y, 111)
    });
    fd_check(&[x], FD_H, FD_TOL, "relu", &|tape, ids| {
        let y = tape.relu(ids[0]);
        weighted_sum(tape, y, 112)
    });
}

#[test]
fn fd_gather_concat_reshape() {
    let mut rng = trng(17);
    let table = rand_t(&mut rng, &[4, 3], 1.0);
    fd_check(&[table], FD_H, FD_TOL, "gather_rows", &|tape, ids| {
        let y = tape.gather_rows(ids[0], &[1, 1, 3, 0])?;
        weighted_sum(tape, y, 113)
    });
    let a = rand_t(&mut rng, &[3, 2], 1.0);
    let b = rand_t(&mut rng, &[3, 4], 1.0);
    fd_check(&[a.clone(), b], FD_H, FD_TOL, "concat_cols", &|tape, ids| {
        let y = tape.concat_cols(&[ids[0], ids[1]])?;
        weighted_sum(tape, y, 114)
    });
    fd_check(&[a], FD_H, FD_TOL, "reshape", &|tape, ids| {
        let y = tape.reshape(ids[0], &[2, 3])?;
        weighted_sum(tape, y, 115)
    });
}

#[test]
fn fd_dropout_under_fixed_mask() {
    let mut rng = trng(18);
    let x = rand_t(&mut rng, &[4, 4], 1.0);
    fd_check(&[x], FD_H, FD_TOL, "dropout", &|tape, ids| {
        let mut d_rng = trng(42);
        let y = tape.dropout(ids[0], 0.5, true, &mut d_rng)?;
        weighted_sum(tape, y, 116)
    });
}

#[test]
fn fd_cross_entropy() {
    let mut rng = trng(19);
    let logits = rand_t(&mut rng, &[4, 6], 2.0);
    fd_check(&[logits], FD_H, FD_TOL, "cross_entropy_sum", &|tape, ids| {
        tape.cross_entropy_sum(ids[0], &[2, 0, 5, 3])
    });
}

#[test]
fn fd_sum() {
    let mut rng = trng(20);
    let x = rand_t(&mut rng, &[3, 3], 1.0);
    fd_check(&[x], FD_H, FD_TOL, "sum", &|tape, ids| Ok(tape.sum(ids[0])));
}
