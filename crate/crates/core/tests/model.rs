//! Model assembly tests: presets, embeddings, the MLM head with weight
//! tying, initialization statistics, and batch validation.

mod common;

use common::*;

use rafl::autodiff::Tape;
use rafl::encoder::{Activation, ResidualMode, Variant};
use rafl::model::{
    attention_mask_bias, default_residual_mode, init_parameters, param_count, param_shapes, preset,
    ForwardOpts, Model, ModelConfig, TrainingBatch, INIT_STD, MASK, NUM_RESERVED, PAD,
};
use rafl::tensor::Tensor;
use rafl::Error;

/// Std of a standard normal truncated at +-2 sigma, relative to sigma:
/// sqrt(1 - 4*phi(2)/(2*Phi(2)-1)).
const TRUNC_STD_CORRECTION: f64 = 0.87962566103423975041;

fn tiny() -> ModelConfig {
    preset("tiny").unwrap()
}

fn micro() -> ModelConfig {
    ModelConfig {
        variant: Variant::Realformer,
        residual_mode: ResidualMode::Sum,
        layers: 1,
        hidden: 4,
        heads: 1,
        intermediate: 8,
        vocab_size: 8,
        max_seq_len: 6,
        dropout_rate: 0.0,
        activation: Activation::Gelu,
        seed: 9,
        residual_includes_mask: false,
        nsp: false,
    }
}

fn micro_batch() -> TrainingBatch {
    TrainingBatch {
        token_ids: vec![vec![2, 5, 4, 7, 3, 0]],
        segment_ids: vec![vec![0; 6]],
        input_mask: vec![vec![1, 1, 1, 1, 1, 0]],
        masked_positions: vec![(0, 1), (0, 2)],
        masked_labels: vec![5, 6],
    }
}

#[test]
fn presets_match_published_ladder() {
    let dims = |name: &str| {
        let c = preset(name).unwrap();
        (c.layers, c.hidden, c.heads, c.intermediate)
    };
    assert_eq!(dims("small"), (4, 512, 8, 2048));
    assert_eq!(dims("base"), (12, 768, 12, 3072));
    assert_eq!(dims("large"), (24, 1024, 16, 4096));
    assert_eq!(dims("xlarge"), (36, 1536, 24, 6144));
    assert_eq!(dims("tiny"), (2, 16, 2, 32));
    assert_eq!(dims("desk"), (4, 64, 4, 256));

    let small = preset("small").unwrap();
    assert_eq!(small.variant, Variant::Realformer);
    assert_eq!(small.dropout_rate, 0.1);
    assert_eq!(small.seed, 42);
    assert_eq!(small.residual_mode, ResidualMode::Sum);
    // Depth rule: running mean only past 24 layers.
    assert_eq!(preset("large").unwrap().residual_mode, ResidualMode::Sum);
    assert_eq!(preset("xlarge").unwrap().residual_mode, ResidualMode::RunningMean);
    assert_eq!(default_residual_mode(24), ResidualMode::Sum);
    assert_eq!(default_residual_mode(25), ResidualMode::RunningMean);

    assert!(matches!(preset("huge"), Err(Error::Config(_))));
}

#[test]
fn config_validation_rejects_bad_shapes() {
    let mut c = tiny();
    c.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))), "hidden % heads");
    let mut c = tiny();
    c.dropout_rate = 1.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))), "dropout must be < 1");
    let mut c = tiny();
    c.variant = Variant::Realformer;
    c.residual_mode = ResidualMode::None;
    assert!(matches!(c.validate(), Err(Error::Config(_))), "realformer needs a mode");
    let mut c = tiny();
    c.variant = Variant::PostLn;
    c.residual_mode = ResidualMode::None;
    assert!(c.validate().is_ok());
}

#[test]
fn param_count_closed_form_matches_shape_table() {
    for name in ["small", "base", "large", "xlarge", "tiny", "desk"] {
        let mut cfg = preset(name).unwrap();
        for variant in [Variant::PostLn, Variant::PreLn, Variant::Realformer] {
            cfg.variant = variant;
            cfg.residual_mode = if variant == Variant::Realformer {
                ResidualMode::Sum
            } else {
                ResidualMode::None
            };
            let total: usize = param_shapes(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(param_count(&cfg), total, "{name} {variant:?}");
        }
    }
}

#[test]
fn param_count_small_matches_independent_hand_count() {
    let cfg = preset("small").unwrap();
    let (h, i, v, p) = (512usize, 2048usize, 8192usize, 512usize);
    let embeddings = v * h + p * h + 2 * h + (h + h);
    let attn = 3 * h * h + h * h + (h + h);
    let ffn = h * i + i + i * h + h + (h + h);
    let mlm = h * h + h + (h + h) + v;
    assert_eq!(param_count(&cfg), embeddings + 4 * (attn + ffn) + mlm);
    assert_eq!(param_count(&cfg), 17_331_712);
}

#[test]
fn init_is_seed_deterministic_and_truncated() {
    let cfg = tiny();
    let a = init_parameters(&cfg).unwrap();
    let b = init_parameters(&cfg).unwrap();
    assert!(a.bits_eq(&b), "same seed gives bit-identical stores");
    assert_eq!(a.param_count(), param_count(&cfg));
    let mut c = cfg.clone();
    c.seed = 43;
    let other = init_parameters(&c).unwrap();
    assert!(!a.bits_eq(&other), "different seed moves the weights");

    let bound = 2.0 * INIT_STD;
    for (path, t) in a.iter() {
        if path.contains("ln.gamma") {
            assert!(t.data().iter().all(|&x| x == 1.0), "{path}");
        } else if path.contains(".b") || path.contains("beta") || path.contains("output_bias") {
            assert!(t.data().iter().all(|&x| x == 0.0), "{path}");
        } else {
            assert!(t.data().iter().all(|&x| x.abs() <= bound), "{path} exceeds truncation bound");
        }
    }
}

#[test]
fn init_std_matches_truncated_normal_moments() {
    // One parameter with 1e5 elements gives a tight empirical estimate.
    let cfg = ModelConfig { vocab_size: 6_250, hidden: 16, ..micro() };
    let store = init_parameters(&cfg).unwrap();
    let t = store.get("embedding.token").unwrap();
    assert_eq!(t.numel(), 100_000);
    let n = t.numel() as f64;
    let mean: f64 = t.data().iter().sum::<f64>() / n;
    let var: f64 = t.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let expect = INIT_STD * TRUNC_STD_CORRECTION;
    let ratio = var.sqrt() / expect;
    assert!((ratio - 1.0).abs() < 0.03, "empirical std off by {:.4}", ratio - 1.0);
}

#[test]
fn pre_ln_scales_residual_projections_only() {
    let mut real = tiny();
    real.variant = Variant::Realformer;
    real.residual_mode = ResidualMode::Sum;
    let mut pre = tiny();
    pre.variant = Variant::PreLn;
    pre.residual_mode = ResidualMode::None;
    let a = init_parameters(&real).unwrap();
    let b = init_parameters(&pre).unwrap();
    let s = 1.0 / (2.0 * real.layers as f64).sqrt();
    for (path, ta) in a.iter() {
        let tb = b.get(path).expect("shared path");
        if path.ends_with("attention.wo") || path.ends_with("ffn.w2") {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(*y, *x * s, "{path} scaled by 1/sqrt(2L)");
            }
        } else {
            assert!(ta.bits_eq(tb), "{path} unscaled");
        }
    }
    assert!(b.get("final_ln.gamma").is_some(), "pre_ln owns the final LN");
    assert!(a.get("final_ln.gamma").is_none());
}

#[test]
fn zero_embedding_tables_embed_to_zero() {
    let model = {
        let mut m = Model::new(tiny()).unwrap();
        for path in ["embedding.token", "embedding.position", "embedding.segment"] {
            let t = m.store.get_mut(path).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        m
    };
    let mut tape = Tape::new();
    let (_, out) = model.embed(&mut tape, &[2, 7, 8, 3], &[0, 0, 1, 1]).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn embed_is_deterministic() {
    let model = Model::new(tiny()).unwrap();
    let mut t1 = Tape::new();
    let (_, a) = model.embed(&mut t1, &[2, 7, 8, 3], &[0, 0, 1, 1]).unwrap();
    let mut t2 = Tape::new();
    let (_, b) = model.embed(&mut t2, &[2, 7, 8, 3], &[0, 0, 1, 1]).unwrap();
    assert!(t1.value(a).bits_eq(t2.value(b)));
}

#[test]
fn token_change_perturbs_only_its_row_before_ln() {
    let model = Model::new(tiny()).unwrap();
    let mut t1 = Tape::new();
    let (sum_a, _) = model.embed(&mut t1, &[2, 7, 8, 3], &[0, 0, 1, 1]).unwrap();
    let mut t2 = Tape::new();
    let (sum_b, _) = model.embed(&mut t2, &[2, 7, 9, 3], &[0, 0, 1, 1]).unwrap();
    let a = t1.value(sum_a);
    let b = t2.value(sum_b);
    let h = model.cfg.hidden;
    for row in 0..4 {
        let same = a.data()[row * h..(row + 1) * h] == b.data()[row * h..(row + 1) * h];
        assert_eq!(same, row != 2, "row {row}");
    }
}

#[test]
fn embed_rejects_out_of_range_ids() {
    let model = Model::new(tiny()).unwrap();
    let mut tape = Tape::new();
    let big = model.cfg.vocab_size;
    assert!(matches!(model.embed(&mut tape, &[2, big, 3], &[0, 0, 0]), Err(Error::Data(_))));
    let long = vec![2; model.cfg.max_seq_len + 1];
    let segs = vec![0; long.len()];
    assert!(matches!(model.embed(&mut tape, &long, &segs), Err(Error::Data(_))));
}

#[test]
fn zero_hidden_decodes_to_uniform_logits() {
    let model = Model::new(tiny()).unwrap();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let hidden = tape.leaf(Tensor::zeros(&[4, model.cfg.hidden]));
    let logits = model.mlm_logits(&mut tape, &binding, hidden, &[0, 2]).unwrap();
    let t = tape.value(logits);
    assert_eq!(t.shape(), &[2, model.cfg.vocab_size]);
    assert!(t.data().iter().all(|&v| v == 0.0), "zero head inputs give zero logits");
    let probs = tape.softmax_rows(logits, None).unwrap();
    let expect = 1.0 / model.cfg.vocab_size as f64;
    assert!(tape.value(probs).data().iter().all(|&p| p == expect), "softmax is exactly uniform");
}

#[test]
fn mlm_logits_validates_positions() {
    let model = Model::new(tiny()).unwrap();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let hidden = tape.leaf(Tensor::zeros(&[4, model.cfg.hidden]));
    assert!(matches!(
        model.mlm_logits(&mut tape, &binding, hidden, &[4]),
        Err(Error::Data(_))
    ));
}

#[test]
fn tied_embedding_gradient_matches_finite_differences() {
    let cfg = micro();
    let batch = micro_batch();
    let loss_of = |store: rafl::model::ParameterStore| -> f64 {
        let m = Model::from_parts(cfg.clone(), store);
        let mut tape = Tape::new();
        let run = m.forward_mlm(&mut tape, &batch, ForwardOpts::default(), &mut trng(0)).unwrap();
        tape.value(run.loss).data()[0]
    };
    let model = Model::new(cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let run = model.forward_mlm(&mut tape, &batch, ForwardOpts::default(), &mut trng(0)).unwrap();
    let grads = tape.backward(run.loss).unwrap();
    let analytic = grads.get(run.enc.binding.id("embedding.token")).expect("token grad");

    // Token 5 is both an input and a label, so its row sees the embedding
    // use and the decoder use at once; fd validates the combined flow.
    let row5 = &analytic.data()[5 * cfg.hidden..6 * cfg.hidden];
    assert!(row5.iter().any(|&v| v != 0.0));

    let h = 1e-5;
    let base = model.store.clone();
    for idx in [0usize, 5, 20, 21, 22, 23, 28] {
        let probe = |delta: f64| -> f64 {
            let mut st = base.clone();
            st.get_mut("embedding.token").unwrap().data_mut()[idx] += delta;
            loss_of(st)
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h);
        let a = analytic.data()[idx];
        assert!(
            rafl::autodiff::rel_err(a, fd, 1e-5) < 1e-4,
            "element {idx}: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn initial_loss_is_seed_determined() {
    let cfg = tiny();
    let batch = TrainingBatch {
        token_ids: vec![vec![2, 7, 4, 9, 3, 0, 0, 0]],
        segment_ids: vec![vec![0; 8]],
        input_mask: vec![vec![1, 1, 1, 1, 1, 0, 0, 0]],
        masked_positions: vec![(0, 2)],
        masked_labels: vec![8],
    };
    let run = |seed: u64| -> f64 {
        let mut c = cfg.clone();
        c.seed = seed;
        let m = Model::new(c).unwrap();
        let mut tape = Tape::new();
        let r = m.forward_mlm(&mut tape, &batch, ForwardOpts::default(), &mut trng(0)).unwrap();
        tape.value(r.loss).data()[0]
    };
    let a = run(42);
    let b = run(42);
    assert_eq!(a.to_bits(), b.to_bits(), "loss is a pure function of (seed, config)");
    assert_ne!(run(43).to_bits(), a.to_bits());
}

#[test]
fn forward_batch_validates_inputs() {
    let model = Model::new(tiny()).unwrap();
    let mut tape = Tape::new();
    let opts = ForwardOpts::default();

    let empty: Vec<Vec<usize>> = vec![];
    let r = model.forward_batch(&mut tape, &empty, &[], &[], opts, &mut trng(0));
    assert!(matches!(r, Err(Error::Data(_))), "empty batch");

    let r = model.forward_batch(
        &mut tape,
        &[vec![2, 3], vec![2, 3, 0]],
        &[vec![0, 0], vec![0, 0, 0]],
        &[vec![1, 1], vec![1, 1, 0]],
        opts,
        &mut trng(0),
    );
    assert!(matches!(r, Err(Error::Data(_))), "ragged rows");

    let r = model.forward_batch(
        &mut tape,
        &[vec![2, 99, 3]],
        &[vec![0, 0, 0]],
        &[vec![1, 1, 1]],
        opts,
        &mut trng(0),
    );
    assert!(matches!(r, Err(Error::Data(_))), "token out of vocab");

    let r = model.forward_batch(
        &mut tape,
        &[vec![2, 7, 3]],
        &[vec![0, 2, 0]],
        &[vec![1, 1, 1]],
        opts,
        &mut trng(0),
    );
    assert!(matches!(r, Err(Error::Data(_))), "segment id must be 0/1");
}

#[test]
fn forward_mlm_requires_masked_positions() {
    let model = Model::new(tiny()).unwrap();
    let mut batch = micro_batch();
    batch.token_ids = vec![vec![2, 7, 4, 9, 3, 0]];
    batch.masked_positions.clear();
    batch.masked_labels.clear();
    let mut tape = Tape::new();
    let r = model.forward_mlm(&mut tape, &batch, ForwardOpts::default(), &mut trng(0));
    match r {
        Err(Error::Data(msg)) => assert!(msg.contains("empty masked set"), "{msg}"),
        Err(e) => panic!("wrong error kind: {e:?}"),
        Ok(_) => panic!("expected a data error"),
    }
}

#[test]
fn mask_bias_tensor_marks_padding() {
    let bias = attention_mask_bias(&[vec![1, 1, 0], vec![0, 1, 1]], 3).unwrap();
    assert_eq!(bias.shape(), &[2, 1, 3]);
    assert_eq!(bias.data(), &[0.0, 0.0, -1e9, -1e9, 0.0, 0.0]);
}

#[test]
fn mask_ablation_routes_bias_into_propagated_scores() {
    let mut cfg = tiny();
    cfg.dropout_rate = 0.0;
    let tokens = vec![vec![2, 7, 8, 3, PAD, PAD]];
    let segments = vec![vec![0; 6]];
    let input_mask = vec![vec![1, 1, 1, 1, 0, 0]];

    let scores_of = |cfg: &ModelConfig| -> Vec<Vec<f64>> {
        let m = Model::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let run = m
            .forward_batch(&mut tape, &tokens, &segments, &input_mask, ForwardOpts::default(), &mut trng(0))
            .unwrap();
        run.trace
            .scores
            .iter()
            .flatten()
            .map(|&id| tape.value(id).data().to_vec())
            .collect()
    };

    let clean = scores_of(&cfg);
    assert!(
        clean.iter().flatten().all(|&v| v.abs() < 1e6),
        "default keeps the score stream mask-free"
    );

    cfg.residual_includes_mask = true;
    let dirty = scores_of(&cfg);
    let s = 6;
    let mut saw_bias = false;
    for head in &dirty {
        for i in 0..s {
            for j in 4..6 {
                if head[i * s + j] < -1e8 {
                    saw_bias = true;
                }
            }
        }
    }
    assert!(saw_bias, "ablation stores the -1e9 bias inside the propagated scores");
}

#[test]
fn reserved_token_constants_are_stable() {
    assert_eq!(PAD, 0);
    assert_eq!(MASK, 4);
    assert_eq!(NUM_RESERVED, 5);
}
