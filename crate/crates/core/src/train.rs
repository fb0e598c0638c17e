//! MLM objective, AdamW, warmup/linear-decay schedule, the training loop,
//! and the three-variant comparison harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, ValueId};
use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::data::{Corpus, Example};
use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::model::{
    Binding, Model, ModelConfig, ParameterStore, TrainingBatch, ForwardOpts, MASK, NUM_RESERVED,
};
use crate::rng;

/// Fraction of selected positions replaced by `[MASK]`; of the rest, half are
/// randomized and half left unchanged.
pub const MASK_PROB: f64 = 0.8;
pub const RANDOM_PROB: f64 = 0.1;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Consecutive bad steps before the divergence flag trips.
pub const DIVERGENCE_PATIENCE: u32 = 50;

// ---------------------------------------------------------------------------
// masking

/// BERT-style masking over a padded batch. Selects ceil(rate * maskable)
/// positions per row; special ids (< 5) and padding are never selected.
pub fn mask_tokens(
    examples: &[Example],
    rng: &mut ChaCha8Rng,
    mask_rate: f64,
    vocab_size: usize,
) -> Result<TrainingBatch> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask_rate {mask_rate} outside (0, 1)")));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config(format!("vocab_size {vocab_size} has no maskable ids")));
    }
    let mut token_ids = Vec::with_capacity(examples.len());
    let mut segment_ids = Vec::with_capacity(examples.len());
    let mut input_mask = Vec::with_capacity(examples.len());
    let mut masked_positions = Vec::new();
    let mut masked_labels = Vec::new();
    for (row, ex) in examples.iter().enumerate() {
        let mut tokens = ex.tokens.clone();
        let mut maskable: Vec<usize> = (0..tokens.len())
            .filter(|&i| ex.mask[i] == 1 && tokens[i] >= NUM_RESERVED)
            .collect();
        if maskable.is_empty() {
            return Err(Error::Data(format!("row {row} has no maskable tokens")));
        }
        let k = ((mask_rate * maskable.len() as f64).ceil() as usize).min(maskable.len());
        // Partial Fisher-Yates; the first k entries are the sample.
        for i in 0..k {
            let j = rng.gen_range(i..maskable.len());
            maskable.swap(i, j);
        }
        let mut picked = maskable[..k].to_vec();
        picked.sort_unstable();
        for pos in picked {
            let original = tokens[pos];
            let roll: f64 = rng.gen();
            if roll < MASK_PROB {
                tokens[pos] = MASK;
            } else if roll < MASK_PROB + RANDOM_PROB {
                tokens[pos] = rng.gen_range(NUM_RESERVED..vocab_size);
            }
            masked_positions.push((row, pos));
            masked_labels.push(original);
        }
        token_ids.push(tokens);
        segment_ids.push(ex.segments.clone());
        input_mask.push(ex.mask.clone());
    }
    Ok(TrainingBatch { token_ids, segment_ids, input_mask, masked_positions, masked_labels })
}

// ---------------------------------------------------------------------------
// loss and accuracy

/// Fraction of logit rows whose argmax equals the label. Ties resolve to the
/// earliest index.
pub fn accuracy_from_logits(logits: &crate::tensor::Tensor, labels: &[usize]) -> Result<f64> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    if rows != labels.len() {
        return Err(Error::Data(format!("{rows} logit rows vs {} labels", labels.len())));
    }
    let data = logits.data();
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &data[r * v..(r + 1) * v];
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean cross-entropy over masked positions plus argmax accuracy.
pub fn mlm_loss(tape: &mut Tape, logits: ValueId, labels: &[usize]) -> Result<(ValueId, f64)> {
    if labels.is_empty() {
        return Err(Error::Data("empty masked set".into()));
    }
    let accuracy = accuracy_from_logits(tape.value(logits), labels)?;
    let ce = tape.cross_entropy_sum(logits, labels)?;
    let loss = tape.scale(ce, 1.0 / labels.len() as f64);
    Ok((loss, accuracy))
}

// ---------------------------------------------------------------------------
// schedule and optimizer

/// Linear warmup to `peak` at `step == warmup`, then linear decay to 0 at
/// `total`; 0 beyond.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHparams {
    fn default() -> AdamHparams {
        AdamHparams { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01 }
    }
}

/// Per-parameter Adam moments keyed by parameter path.
pub struct OptimizerState {
    pub m: ParameterStore,
    pub v: ParameterStore,
    pub t: u64,
    pub hp: AdamHparams,
}

impl OptimizerState {
    pub fn new(hp: AdamHparams) -> OptimizerState {
        OptimizerState { m: ParameterStore::new(), v: ParameterStore::new(), t: 0, hp }
    }
}

/// Weight decay skips vectors and scalars: LN gains/biases and all bias
/// terms are rank < 2.
pub fn decay_applies(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// Copy gradients out of a tape run, keyed by parameter path. Parameters that
/// did not participate in the forward pass are absent.
pub fn collect_grads(binding: &Binding, grads: &Gradients) -> BTreeMap<String, crate::tensor::Tensor> {
    let mut out = BTreeMap::new();
    for (path, id) in binding.iter() {
        if let Some(g) = grads.get(id) {
            out.insert(path.clone(), g.clone());
        }
    }
    out
}

/// One decoupled-decay Adam step. Every gradient is checked for finiteness
/// before any parameter or moment mutates, so a failed step leaves the state
/// exactly as it was.
pub fn adamw_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, crate::tensor::Tensor>,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (path, g) in grads {
        let p = store
            .get(path)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {path}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                detail: format!("{path}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { what: "gradient", path: path.clone() });
        }
    }
    opt.t += 1;
    let t = opt.t;
    let hp = opt.hp;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for (path, g) in grads {
        let p = store.get_mut(path).expect("validated above");
        if opt.m.get(path).is_none() {
            opt.m.insert(path.clone(), crate::tensor::Tensor::zeros(p.shape()))?;
            opt.v.insert(path.clone(), crate::tensor::Tensor::zeros(p.shape()))?;
        }
        let decay = decay_applies(p.shape());
        let m = opt.m.get_mut(path).expect("inserted above");
        let v = opt.v.get_mut(path).expect("inserted above");
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..gd.len() {
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gd[i];
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            let mut step = lr * mhat / (vhat.sqrt() + hp.eps);
            if decay {
                step += lr * hp.weight_decay * pd[i];
            }
            pd[i] -= step;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// divergence detection

/// Sticky flag that trips after `patience` consecutive steps whose loss is
/// non-finite or above the first observed loss. A log marker, not a stop.
#[derive(Clone, Debug)]
pub struct DivergenceDetector {
    pub patience: u32,
    pub initial_loss: Option<f64>,
    pub run: u32,
    pub tripped_at: Option<u64>,
}

impl DivergenceDetector {
    pub fn new(patience: u32) -> DivergenceDetector {
        DivergenceDetector { patience, initial_loss: None, run: 0, tripped_at: None }
    }

    pub fn observe(&mut self, step: u64, loss: f64) {
        if self.initial_loss.is_none() && loss.is_finite() {
            self.initial_loss = Some(loss);
        }
        let bad = match self.initial_loss {
            Some(init) => !loss.is_finite() || loss > init,
            None => true,
        };
        if bad {
            self.run += 1;
            if self.run >= self.patience && self.tripped_at.is_none() {
                self.tripped_at = Some(step);
            }
        } else {
            self.run = 0;
        }
    }

    pub fn diverged(&self) -> bool {
        self.tripped_at.is_some()
    }
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

/// Deterministic masked evaluation over `indices`: the masking rng is freshly
/// seeded per call, and dropout is off, so repeat calls agree bitwise.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    indices: &[usize],
    batch_size: usize,
    mask_rate: f64,
    eval_seed: u64,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut eval_rng = rng::seeded(eval_seed, rng::STREAM_EVAL);
    let mut loss_sum = 0.0;
    let mut hits = 0.0;
    let mut masked = 0usize;
    for chunk in indices.chunks(batch_size) {
        let examples: Vec<Example> = chunk.iter().map(|&i| corpus.examples[i].clone()).collect();
        let batch = mask_tokens(&examples, &mut eval_rng, mask_rate, corpus.vocab_size)?;
        let k = batch.masked_labels.len();
        let mut tape = Tape::new();
        let run = model.forward_mlm(&mut tape, &batch, ForwardOpts::default(), &mut eval_rng)?;
        let loss = tape.value(run.loss).data()[0];
        let acc = accuracy_from_logits(tape.value(run.logits), &batch.masked_labels)?;
        loss_sum += loss * k as f64;
        hits += acc * k as f64;
        masked += k;
    }
    Ok(EvalReport { loss: loss_sum / masked as f64, accuracy: hits / masked as f64, masked })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Total optimizer steps for the whole run (absolute, not incremental).
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Evaluate the dev split every this many steps; 0 = final step only.
    pub eval_every: u64,
    /// Write a checkpoint every this many steps; 0 = none mid-run.
    pub checkpoint_every: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
}

impl TrainConfig {
    /// The recipe that reliably saturates the synthetic tasks at desk scale.
    /// Smaller batches or a lower peak leave the copy task half-learned at
    /// the default horizon.
    pub fn desk_defaults(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 2000,
            warmup: 200,
            peak_lr: 2e-3,
            weight_decay: 0.01,
            batch_size: 8,
            mask_rate: DEFAULT_MASK_RATE,
            eval_every: 0,
            checkpoint_every: 0,
            data_seed: seed,
            eval_seed: seed,
        }
    }

    pub fn hparams(&self) -> AdamHparams {
        AdamHparams { weight_decay: self.weight_decay, ..AdamHparams::default() }
    }
}

pub struct TrainState {
    pub model: Model,
    pub opt: OptimizerState,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub step: u64,
    pub detector: DivergenceDetector,
}

pub fn init_train_state(cfg: &ModelConfig, tc: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let model = Model::new(cfg.clone())?;
    Ok(TrainState {
        model,
        opt: OptimizerState::new(tc.hparams()),
        data_rng: rng::seeded(tc.data_seed, rng::STREAM_DATA),
        dropout_rng: rng::seeded(cfg.seed, rng::STREAM_DROPOUT),
        step: 0,
        detector: DivergenceDetector::new(DIVERGENCE_PATIENCE),
    })
}

/// Snapshot everything the loop needs to resume bitwise: parameters, Adam
/// moments, both rng streams, and the detector.
pub fn make_training_checkpoint(state: &TrainState) -> Checkpoint {
    let mut rng_map = BTreeMap::new();
    rng_map.insert("data".to_string(), rng::state_string(&state.data_rng));
    rng_map.insert("dropout".to_string(), rng::state_string(&state.dropout_rng));
    Checkpoint {
        config: state.model.cfg.clone(),
        step: state.step,
        params: state.model.store.clone(),
        rng: rng_map,
        train: Some(TrainMeta {
            opt_step: state.opt.t,
            divergence_run: state.detector.run,
            diverged_at: state.detector.tripped_at,
            initial_loss_bits: state.detector.initial_loss.map(|l| l.to_bits().to_string()),
        }),
        moments: Some((state.opt.m.clone(), state.opt.v.clone())),
    }
}

pub fn state_from_checkpoint(ckpt: Checkpoint, tc: &TrainConfig) -> Result<TrainState> {
    ckpt.validate_for(&ckpt.config)?;
    let data_rng = match ckpt.rng.get("data") {
        Some(s) => rng::from_state_string(s)?,
        None => rng::seeded(tc.data_seed, rng::STREAM_DATA),
    };
    let dropout_rng = match ckpt.rng.get("dropout") {
        Some(s) => rng::from_state_string(s)?,
        None => rng::seeded(ckpt.config.seed, rng::STREAM_DROPOUT),
    };
    let mut opt = OptimizerState::new(tc.hparams());
    let mut detector = DivergenceDetector::new(DIVERGENCE_PATIENCE);
    if let Some(meta) = &ckpt.train {
        opt.t = meta.opt_step;
        detector.run = meta.divergence_run;
        detector.tripped_at = meta.diverged_at;
        detector.initial_loss = match &meta.initial_loss_bits {
            Some(bits) => Some(f64::from_bits(bits.parse().map_err(|_| {
                Error::CkptManifest(format!("bad initial_loss_bits {bits:?}"))
            })?)),
            None => None,
        };
    }
    if let Some((m, v)) = ckpt.moments {
        opt.m = m;
        opt.v = v;
    }
    Ok(TrainState {
        model: Model::from_parts(ckpt.config, ckpt.params),
        opt,
        data_rng,
        dropout_rng,
        step: ckpt.step,
        detector,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_acc: Option<f64>,
    pub diverged: bool,
}

pub const METRICS_HEADER: &str = "step,lr,train_loss,dev_loss,dev_mlm_acc,diverged";

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.lr,
            r.train_loss,
            fmt_opt(r.dev_loss),
            fmt_opt(r.dev_acc),
            u8::from(r.diverged)
        ));
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

#[derive(Debug)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Steps whose update was skipped because a gradient went non-finite.
    pub aborted_steps: u64,
    pub final_dev: Option<EvalReport>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
}

/// Run the loop from `state.step` up to `tc.steps`. Deterministic given the
/// state; periodic checkpoints land in `out_dir` when provided.
pub fn train(
    state: &mut TrainState,
    corpus: &Corpus,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    corpus.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if corpus.vocab_size > state.model.cfg.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} exceeds model vocab {}",
            corpus.vocab_size, state.model.cfg.vocab_size
        )));
    }
    let eval_indices: &[usize] = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let mut metrics = Vec::new();
    let mut aborted = 0u64;
    let mut final_dev = None;
    while state.step < tc.steps {
        let step = state.step + 1;
        let lr = lr_at(step, tc.peak_lr, tc.warmup, tc.steps);
        let examples: Vec<Example> = (0..tc.batch_size)
            .map(|_| corpus.examples[corpus.train[state.data_rng.gen_range(0..corpus.train.len())]].clone())
            .collect();
        let batch = mask_tokens(&examples, &mut state.data_rng, tc.mask_rate, corpus.vocab_size)?;
        let mut tape = Tape::new();
        let run = state.model.forward_mlm(
            &mut tape,
            &batch,
            ForwardOpts { training: true, ablate_score_residual: false },
            &mut state.dropout_rng,
        )?;
        let train_loss = tape.value(run.loss).data()[0];
        state.detector.observe(step, train_loss);
        if train_loss.is_finite() {
            let grads = tape.backward(run.loss)?;
            let by_path = collect_grads(&run.enc.binding, &grads);
            match adamw_step(&mut state.model.store, &by_path, &mut state.opt, lr) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => aborted += 1,
                Err(e) => return Err(e),
            }
        } else {
            aborted += 1;
        }
        state.step = step;
        let (mut dev_loss, mut dev_acc) = (None, None);
        let eval_now = (tc.eval_every > 0 && step % tc.eval_every == 0) || step == tc.steps;
        if eval_now {
            let report =
                evaluate(&state.model, corpus, eval_indices, tc.batch_size, tc.mask_rate, tc.eval_seed)?;
            dev_loss = Some(report.loss);
            dev_acc = Some(report.accuracy);
            if step == tc.steps {
                final_dev = Some(report);
            }
        }
        metrics.push(MetricsRow {
            step,
            lr,
            train_loss,
            dev_loss,
            dev_acc,
            diverged: state.detector.diverged(),
        });
        if let (Some(dir), true) = (out_dir, tc.checkpoint_every > 0) {
            if step % tc.checkpoint_every == 0 && step != tc.steps {
                let name = format!("ckpt_{step:07}.rafl");
                make_training_checkpoint(state).save(&dir.join(name))?;
            }
        }
    }
    Ok(TrainReport {
        metrics,
        aborted_steps: aborted,
        final_dev,
        diverged: state.detector.diverged(),
        diverged_at: state.detector.tripped_at,
    })
}

// ---------------------------------------------------------------------------
// gradient checking

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params_checked: usize,
    pub elements_checked: usize,
    pub max_rel_err: f64,
    pub worst_path: String,
}

/// Central-difference check of every parameter element against the tape
/// gradients, dropout off. `h` is the probe half-width.
pub fn gradcheck(cfg: &ModelConfig, batch: &TrainingBatch, h: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut model = Model::new(cfg.clone())?;
    let mut probe_rng = rng::seeded(cfg.seed, rng::STREAM_DROPOUT);
    let loss_of = |model: &Model, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut tape = Tape::new();
        let run = model.forward_mlm(&mut tape, batch, ForwardOpts::default(), rng)?;
        Ok(tape.value(run.loss).data()[0])
    };
    let analytic = {
        let mut tape = Tape::new();
        let run = model.forward_mlm(&mut tape, batch, ForwardOpts::default(), &mut probe_rng)?;
        let grads = tape.backward(run.loss)?;
        collect_grads(&run.enc.binding, &grads)
    };
    let paths: Vec<String> = model.store.iter().map(|(p, _)| p.clone()).collect();
    let mut worst = (0.0f64, String::new());
    let mut elements = 0usize;
    for path in &paths {
        let n = model.store.get(path).expect("own path").numel();
        for i in 0..n {
            let orig = model.store.get(path).unwrap().data()[i];
            model.store.get_mut(path).unwrap().data_mut()[i] = orig + h;
            let up = loss_of(&model, &mut probe_rng)?;
            model.store.get_mut(path).unwrap().data_mut()[i] = orig - h;
            let down = loss_of(&model, &mut probe_rng)?;
            model.store.get_mut(path).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.get(path).map_or(0.0, |g| g.data()[i]);
            let err = crate::autodiff::rel_err(a, fd, 1e-5);
            if err > worst.0 {
                worst = (err, format!("{path}[{i}]"));
            }
            elements += 1;
        }
    }
    Ok(GradcheckReport {
        params_checked: paths.len(),
        elements_checked: elements,
        max_rel_err: worst.0,
        worst_path: worst.1,
    })
}

/// A small fixed batch for gradient checking, drawn from the copy corpus.
pub fn gradcheck_batch(cfg: &ModelConfig, rows: usize) -> Result<TrainingBatch> {
    let seq = cfg.max_seq_len.min(16);
    let corpus = crate::data::synth_corpus(crate::data::CorpusKind::Copy, rows, 11, cfg.vocab_size, seq)?;
    let mut mask_rng = rng::seeded(11, rng::STREAM_DATA);
    mask_tokens(&corpus.examples, &mut mask_rng, DEFAULT_MASK_RATE, cfg.vocab_size)
}

// ---------------------------------------------------------------------------
// compare harness

pub const COMPARE_VARIANTS: [Variant; 3] = [Variant::PostLn, Variant::PreLn, Variant::Realformer];

/// Init seeds are spaced so no two cells share a stream; data seeds depend
/// only on the seed index, so all variants see identical batches and masks.
pub const INIT_SEED_STRIDE: u64 = 1_000_003;

#[derive(Clone, Debug)]
pub struct RunRow {
    pub variant: Variant,
    pub seed_index: u64,
    pub final_train_loss: f64,
    pub final_dev_loss: f64,
    pub final_dev_acc: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_dev_loss: f64,
    pub median_dev_acc: f64,
    pub diverged_runs: usize,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub rows: Vec<RunRow>,
    pub summaries: Vec<VariantSummary>,
    /// Highest median final dev MLM accuracy; ties go to the earlier variant
    /// in (post_ln, pre_ln, realformer) order.
    pub winner: Variant,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn compare_cell(
    base: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    variant_idx: usize,
    seed_index: u64,
    out_dir: Option<&Path>,
) -> Result<RunRow> {
    let variant = COMPARE_VARIANTS[variant_idx];
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.seed = base.seed + INIT_SEED_STRIDE * variant_idx as u64 + seed_index;
    let mut cell_tc = tc.clone();
    cell_tc.data_seed = base.seed + seed_index;
    cell_tc.eval_seed = base.seed;
    cell_tc.checkpoint_every = 0;
    let mut state = init_train_state(&cfg, &cell_tc)?;
    let cell_dir = match out_dir {
        Some(dir) => {
            let d = dir.join(format!("{}_s{}", variant.name(), seed_index));
            std::fs::create_dir_all(&d).map_err(Error::io(&d))?;
            Some(d)
        }
        None => None,
    };
    let report = train(&mut state, corpus, &cell_tc, cell_dir.as_deref())?;
    if let Some(d) = &cell_dir {
        write_metrics(&d.join("metrics.csv"), &report.metrics)?;
    }
    let last = report
        .metrics
        .last()
        .ok_or_else(|| Error::Config("compare requires steps > 0".into()))?;
    let dev = report.final_dev.ok_or_else(|| Error::Config("compare requires a final eval".into()))?;
    Ok(RunRow {
        variant,
        seed_index,
        final_train_loss: last.train_loss,
        final_dev_loss: dev.loss,
        final_dev_acc: dev.accuracy,
        diverged: report.diverged,
    })
}

/// Train all three variants over `seeds` seed indices and rank them by median
/// final dev MLM accuracy. `threads` > 1 runs cells concurrently; the output
/// order is independent of scheduling.
pub fn compare(
    base: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    seeds: u64,
    threads: usize,
    out_dir: Option<&Path>,
) -> Result<CompareOutcome> {
    if seeds == 0 {
        return Err(Error::Config("compare requires at least one seed".into()));
    }
    base.validate()?;
    let cells: Vec<(usize, u64)> =
        (0..COMPARE_VARIANTS.len()).flat_map(|v| (0..seeds).map(move |s| (v, s))).collect();
    let results: Mutex<Vec<Option<Result<RunRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let (v, s) = cells[idx];
                let row = compare_cell(base, tc, corpus, v, s, out_dir);
                results.lock().expect("poisoned compare results").as_mut_slice()[idx] = Some(row);
            });
        }
    });
    let mut rows = Vec::with_capacity(cells.len());
    for slot in results.into_inner().expect("poisoned compare results") {
        rows.push(slot.expect("every cell ran")?);
    }
    let mut summaries = Vec::new();
    for variant in COMPARE_VARIANTS {
        let of_variant: Vec<&RunRow> = rows.iter().filter(|r| r.variant == variant).collect();
        let mut losses: Vec<f64> = of_variant.iter().map(|r| r.final_dev_loss).collect();
        let mut accs: Vec<f64> = of_variant.iter().map(|r| r.final_dev_acc).collect();
        summaries.push(VariantSummary {
            variant,
            median_dev_loss: median(&mut losses),
            median_dev_acc: median(&mut accs),
            diverged_runs: of_variant.iter().filter(|r| r.diverged).count(),
        });
    }
    let mut winner = &summaries[0];
    for s in &summaries[1..] {
        if s.median_dev_acc.total_cmp(&winner.median_dev_acc).is_gt() {
            winner = s;
        }
    }
    let winner = winner.variant;
    Ok(CompareOutcome { rows, summaries, winner })
}

pub const COMPARE_HEADER: &str = "variant,seed_index,final_train_loss,final_dev_loss,final_dev_mlm_acc,diverged";
pub const SUMMARY_HEADER: &str = "variant,median_final_dev_loss,median_final_dev_mlm_acc,diverged_runs";

pub fn write_compare_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.name(),
            r.seed_index,
            r.final_train_loss,
            r.final_dev_loss,
            r.final_dev_acc,
            u8::from(r.diverged)
        ));
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

pub fn write_summary_csv(path: &Path, summaries: &[VariantSummary]) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.variant.name(),
            s.median_dev_loss,
            s.median_dev_acc,
            s.diverged_runs
        ));
    }
    std::fs::write(path, out).map_err(Error::io(path))
}
