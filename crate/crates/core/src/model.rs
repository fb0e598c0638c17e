use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::autodiff::{Tape, ValueId, MASK_BIAS};
use crate::encoder::{encoder_forward, Activation, DropSpec, EncoderTrace, LayerParamIds, ResidualMode, Variant, LN_EPS};
use crate::error::{Error, Result};
use crate::rng::{seeded, trunc_normal, STREAM_INIT};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Reserved token ids shared by every corpus.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub residual_mode: ResidualMode,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub seed: u64,
    /// Ablation: fold the -1e9 mask bias into the propagated scores.
    #[serde(default)]
    pub residual_includes_mask: bool,
    /// Reserved. Next-sentence prediction is not implemented, but the data
    /// pipeline emits segment ids regardless so the flag stays meaningful.
    #[serde(default)]
    pub nsp: bool,
}

/// Residual-mode rule: running mean only pays off for deep stacks.
pub fn default_residual_mode(layers: usize) -> ResidualMode {
    if layers > 24 {
        ResidualMode::RunningMean
    } else {
        ResidualMode::Sum
    }
}

/// Named architecture presets. `small` through `xlarge` follow the standard
/// BERT ladder; `tiny` and `desk` are this crate's own test scales.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let (layers, hidden, heads, intermediate, vocab_size, max_seq_len) = match name {
        "small" => (4, 512, 8, 2048, 8192, 512),
        "base" => (12, 768, 12, 3072, 8192, 512),
        "large" => (24, 1024, 16, 4096, 8192, 512),
        "xlarge" => (36, 1536, 24, 6144, 8192, 512),
        "tiny" => (2, 16, 2, 32, 32, 16),
        "desk" => (4, 64, 4, 256, 32, 32),
        _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
    };
    Ok(ModelConfig {
        variant: Variant::Realformer,
        residual_mode: default_residual_mode(layers),
        layers,
        hidden,
        heads,
        intermediate,
        vocab_size,
        max_seq_len,
        dropout_rate: 0.1,
        activation: Activation::Gelu,
        seed: 42,
        residual_includes_mask: false,
        nsp: false,
    })
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.intermediate == 0 {
            return Err(Error::Config("layers, hidden, heads and intermediate must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.variant == Variant::Realformer && self.residual_mode == ResidualMode::None {
            return Err(Error::Config("realformer requires residual_mode sum or running_mean".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Ordered path -> tensor map. BTreeMap gives deterministic iteration for
/// checkpoints and the optimizer; initialization order is fixed separately
/// by [`param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    map: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.map.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.map.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn bits_eq(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((pa, ta), (pb, tb))| pa == pb && ta.bits_eq(tb))
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        ParameterStore::new()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    /// Residual-branch output projection; Pre-LN scales it by 1/sqrt(2L).
    ResidualOut,
    Ones,
    Zeros,
}

/// Canonical parameter list in initialization order. The order fixes the RNG
/// consumption sequence, so it is part of the determinism contract.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let (h, i, dk) = (cfg.hidden, cfg.intermediate, cfg.d_k());
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| out.push((name, shape, kind));
    push("embedding.token".into(), vec![cfg.vocab_size, h], Weight);
    push("embedding.position".into(), vec![cfg.max_seq_len, h], Weight);
    push("embedding.segment".into(), vec![2, h], Weight);
    push("embedding.ln.gamma".into(), vec![h], Ones);
    push("embedding.ln.beta".into(), vec![h], Zeros);
    for l in 0..cfg.layers {
        for j in 0..cfg.heads {
            push(format!("layer.{l}.attention.wq.head.{j}"), vec![h, dk], Weight);
        }
        for j in 0..cfg.heads {
            push(format!("layer.{l}.attention.wk.head.{j}"), vec![h, dk], Weight);
        }
        for j in 0..cfg.heads {
            push(format!("layer.{l}.attention.wv.head.{j}"), vec![h, dk], Weight);
        }
        push(format!("layer.{l}.attention.wo"), vec![h, h], ResidualOut);
        push(format!("layer.{l}.attention.ln.gamma"), vec![h], Ones);
        push(format!("layer.{l}.attention.ln.beta"), vec![h], Zeros);
        push(format!("layer.{l}.ffn.w1"), vec![h, i], Weight);
        push(format!("layer.{l}.ffn.b1"), vec![i], Zeros);
        push(format!("layer.{l}.ffn.w2"), vec![i, h], ResidualOut);
        push(format!("layer.{l}.ffn.b2"), vec![h], Zeros);
        push(format!("layer.{l}.ffn.ln.gamma"), vec![h], Ones);
        push(format!("layer.{l}.ffn.ln.beta"), vec![h], Zeros);
    }
    if cfg.variant == Variant::PreLn {
        push("final_ln.gamma".into(), vec![h], Ones);
        push("final_ln.beta".into(), vec![h], Zeros);
    }
    push("mlm.dense.w".into(), vec![h, h], Weight);
    push("mlm.dense.b".into(), vec![h], Zeros);
    push("mlm.ln.gamma".into(), vec![h], Ones);
    push("mlm.ln.beta".into(), vec![h], Zeros);
    push("mlm.output_bias".into(), vec![cfg.vocab_size], Zeros);
    out
}

/// Expected (path, shape) table for a config; checkpoint loading validates
/// against this.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_specs(cfg).into_iter().map(|(p, s, _)| (p, s)).collect()
}

/// Closed-form parameter count for a config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (h, i, v, p) = (cfg.hidden, cfg.intermediate, cfg.vocab_size, cfg.max_seq_len);
    let embeddings = v * h + p * h + 2 * h + 2 * h;
    let per_layer = 3 * h * h + h * h + 2 * h + h * i + i + i * h + h + 2 * h;
    let final_ln = if cfg.variant == Variant::PreLn { 2 * h } else { 0 };
    let mlm_head = h * h + h + 2 * h + v;
    embeddings + cfg.layers * per_layer + final_ln + mlm_head
}

/// Truncated-normal init (std 0.02, cut at +-2 std), zeros for biases and LN
/// betas, ones for LN gammas. Pre-LN additionally scales the residual-branch
/// output projections by 1/sqrt(2L). Fully determined by `cfg.seed`.
pub fn init_parameters(cfg: &ModelConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed, STREAM_INIT);
    let residual_scale = if cfg.variant == Variant::PreLn {
        1.0 / (2.0 * cfg.layers as f64).sqrt()
    } else {
        1.0
    };
    let mut store = ParameterStore::new();
    for (path, shape, kind) in param_specs(cfg) {
        let numel: usize = shape.iter().product();
        let t = match kind {
            ParamKind::Ones => Tensor::full(&shape, 1.0),
            ParamKind::Zeros => Tensor::zeros(&shape),
            ParamKind::Weight | ParamKind::ResidualOut => {
                let scale = if kind == ParamKind::ResidualOut { residual_scale } else { 1.0 };
                let data = (0..numel).map(|_| trunc_normal(&mut rng, INIT_STD) * scale).collect();
                Tensor::new(shape, data)?
            }
        };
        store.insert(path, t)?;
    }
    Ok(store)
}

/// Tape handles for every parameter of one forward pass.
pub struct Binding {
    ids: BTreeMap<String, ValueId>,
}

impl Binding {
    pub fn id(&self, path: &str) -> ValueId {
        *self.ids.get(path).unwrap_or_else(|| panic!("parameter {path} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, ValueId)> {
        self.ids.iter().map(|(p, &id)| (p, id))
    }
}

/// One MLM training batch. Labels exist exactly at `masked_positions`
/// (batch row, sequence position); padded slots carry `input_mask` 0.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub segment_ids: Vec<Vec<usize>>,
    pub input_mask: Vec<Vec<u8>>,
    pub masked_positions: Vec<(usize, usize)>,
    pub masked_labels: Vec<usize>,
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOpts {
    pub training: bool,
    /// Replace every threaded score block with zeros; diagnostic knob behind
    /// the RealFormer-vs-Post-LN equivalence check.
    pub ablate_score_residual: bool,
}

/// Forward-pass artifacts for the encoder trunk.
pub struct EncoderRun {
    pub binding: Binding,
    pub trace: EncoderTrace,
    /// token + position + segment sum, before the embedding LN; `[b*s, H]`.
    pub embed_sum: ValueId,
    /// post-LN, post-dropout embedding output; `[b, s, H]`.
    pub embed_out: ValueId,
}

/// Encoder run plus the MLM head outputs.
pub struct MlmRun {
    pub enc: EncoderRun,
    /// `[#masked, vocab]`
    pub logits: ValueId,
    /// mean cross-entropy over masked positions, scalar
    pub loss: ValueId,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        let store = init_parameters(&cfg)?;
        Ok(Model { cfg, store })
    }

    pub fn from_parts(cfg: ModelConfig, store: ParameterStore) -> Model {
        Model { cfg, store }
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .store
            .iter()
            .map(|(path, t)| (path.clone(), tape.leaf(t.clone())))
            .collect();
        Binding { ids }
    }

    fn layer_ids(&self, binding: &Binding) -> Vec<LayerParamIds> {
        (0..self.cfg.layers)
            .map(|l| LayerParamIds {
                attention: AttentionParams {
                    wq: (0..self.cfg.heads)
                        .map(|j| binding.id(&format!("layer.{l}.attention.wq.head.{j}")))
                        .collect(),
                    wk: (0..self.cfg.heads)
                        .map(|j| binding.id(&format!("layer.{l}.attention.wk.head.{j}")))
                        .collect(),
                    wv: (0..self.cfg.heads)
                        .map(|j| binding.id(&format!("layer.{l}.attention.wv.head.{j}")))
                        .collect(),
                    wo: binding.id(&format!("layer.{l}.attention.wo")),
                    heads: self.cfg.heads,
                    d_k: self.cfg.d_k(),
                },
                attn_ln: (
                    binding.id(&format!("layer.{l}.attention.ln.gamma")),
                    binding.id(&format!("layer.{l}.attention.ln.beta")),
                ),
                w1: binding.id(&format!("layer.{l}.ffn.w1")),
                b1: binding.id(&format!("layer.{l}.ffn.b1")),
                w2: binding.id(&format!("layer.{l}.ffn.w2")),
                b2: binding.id(&format!("layer.{l}.ffn.b2")),
                ffn_ln: (
                    binding.id(&format!("layer.{l}.ffn.ln.gamma")),
                    binding.id(&format!("layer.{l}.ffn.ln.beta")),
                ),
            })
            .collect()
    }

    fn check_rows(&self, tokens: &[Vec<usize>], segments: &[Vec<usize>], input_mask: &[Vec<u8>]) -> Result<usize> {
        if tokens.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let s = tokens[0].len();
        if s == 0 || s > self.cfg.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {s} outside 1..={}",
                self.cfg.max_seq_len
            )));
        }
        if segments.len() != tokens.len() || input_mask.len() != tokens.len() {
            return Err(Error::Data("batch field lengths differ".into()));
        }
        for ((t, sg), m) in tokens.iter().zip(segments).zip(input_mask) {
            if t.len() != s || sg.len() != s || m.len() != s {
                return Err(Error::Data("ragged batch rows".into()));
            }
            if let Some(&id) = t.iter().find(|&&id| id >= self.cfg.vocab_size) {
                return Err(Error::Data(format!("token id {id} out of range for vocab {}", self.cfg.vocab_size)));
            }
            if sg.iter().any(|&g| g > 1) {
                return Err(Error::Data("segment ids must be 0 or 1".into()));
            }
        }
        Ok(s)
    }

    /// Token + position + segment embeddings, LN, dropout. Returns the
    /// pre-LN sum and the finished embedding, shapes `[b*s, H]` and `[b, s, H]`.
    #[allow(clippy::too_many_arguments)]
    fn embed_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: &[Vec<usize>],
        segments: &[Vec<usize>],
        drop: DropSpec,
        rng: &mut R,
    ) -> Result<(ValueId, ValueId)> {
        let (b, s) = (tokens.len(), tokens[0].len());
        let flat_tokens: Vec<usize> = tokens.iter().flatten().copied().collect();
        let flat_pos: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let flat_seg: Vec<usize> = segments.iter().flatten().copied().collect();
        let tok = tape.gather_rows(binding.id("embedding.token"), &flat_tokens)?;
        let pos = tape.gather_rows(binding.id("embedding.position"), &flat_pos)?;
        let seg = tape.gather_rows(binding.id("embedding.segment"), &flat_seg)?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add(sum, seg)?;
        let ln = tape.layer_norm(sum, binding.id("embedding.ln.gamma"), binding.id("embedding.ln.beta"), LN_EPS)?;
        let dropped = tape.dropout(ln, drop.rate, drop.training, rng)?;
        let out = tape.reshape(dropped, &[b, s, self.cfg.hidden])?;
        Ok((sum, out))
    }

    /// Single-sequence embedding in inference mode; returns `(pre-LN sum,
    /// embedding)` shaped `[seq, H]`.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize], segments: &[usize]) -> Result<(ValueId, ValueId)> {
        let mask = vec![vec![1u8; tokens.len()]];
        let toks = vec![tokens.to_vec()];
        let segs = vec![segments.to_vec()];
        self.check_rows(&toks, &segs, &mask)?;
        let binding = self.bind(tape);
        let mut rng = seeded(self.cfg.seed, crate::rng::STREAM_DROPOUT);
        let drop = DropSpec { rate: self.cfg.dropout_rate, training: false };
        let (sum, out) = self.embed_batch(tape, &binding, &toks, &segs, drop, &mut rng)?;
        let out2d = tape.reshape(out, &[tokens.len(), self.cfg.hidden])?;
        Ok((sum, out2d))
    }

    /// Full encoder pass over a padded batch.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<usize>],
        segments: &[Vec<usize>],
        input_mask: &[Vec<u8>],
        opts: ForwardOpts,
        rng: &mut R,
    ) -> Result<EncoderRun> {
        let s = self.check_rows(tokens, segments, input_mask)?;
        let binding = self.bind(tape);
        let drop = DropSpec { rate: self.cfg.dropout_rate, training: opts.training };
        let (embed_sum, embed_out) = self.embed_batch(tape, &binding, tokens, segments, drop, rng)?;
        let mask_bias = attention_mask_bias(input_mask, s)?;
        let score_mask = if self.cfg.residual_includes_mask {
            Some(tape.leaf(full_score_bias(input_mask, s)?))
        } else {
            None
        };
        let layers = self.layer_ids(&binding);
        let final_ln = if self.cfg.variant == Variant::PreLn {
            Some((binding.id("final_ln.gamma"), binding.id("final_ln.beta")))
        } else {
            None
        };
        let trace = encoder_forward(
            tape,
            embed_out,
            self.cfg.variant,
            self.cfg.residual_mode,
            &layers,
            final_ln,
            Some(&mask_bias),
            score_mask,
            self.cfg.activation,
            drop,
            rng,
            opts.ablate_score_residual,
        )?;
        Ok(EncoderRun { binding, trace, embed_sum, embed_out })
    }

    /// MLM logits for `positions` (flat `b*s + pos` row indices) from hidden
    /// states: dense + activation + LN, decoded against the transposed token
    /// embedding (weight tying) plus the output bias.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        hidden: ValueId,
        positions: &[usize],
    ) -> Result<ValueId> {
        let ht = tape.value(hidden);
        let rows = ht.numel() / self.cfg.hidden;
        if ht.last_dim() != self.cfg.hidden {
            return Err(Error::Shape {
                op: "mlm_logits",
                detail: format!("hidden {:?} does not end in H={}", ht.shape(), self.cfg.hidden),
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
            return Err(Error::Data(format!("masked position {p} out of range for {rows} rows")));
        }
        let flat = tape.reshape(hidden, &[rows, self.cfg.hidden])?;
        let picked = tape.gather_rows(flat, positions)?;
        let x = tape.matmul(picked, binding.id("mlm.dense.w"))?;
        let x = tape.add(x, binding.id("mlm.dense.b"))?;
        let x = self.cfg.activation.apply(tape, x);
        let x = tape.layer_norm(x, binding.id("mlm.ln.gamma"), binding.id("mlm.ln.beta"), LN_EPS)?;
        let decoder = tape.transpose(binding.id("embedding.token"))?;
        let logits = tape.matmul(x, decoder)?;
        tape.add(logits, binding.id("mlm.output_bias"))
    }

    /// Encoder plus MLM head and mean masked cross-entropy.
    pub fn forward_mlm<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &TrainingBatch,
        opts: ForwardOpts,
        rng: &mut R,
    ) -> Result<MlmRun> {
        if batch.masked_positions.is_empty() {
            return Err(Error::Data("empty masked set".into()));
        }
        if batch.masked_positions.len() != batch.masked_labels.len() {
            return Err(Error::Data("masked positions and labels differ in length".into()));
        }
        let enc = self.forward_batch(tape, &batch.token_ids, &batch.segment_ids, &batch.input_mask, opts, rng)?;
        let s = batch.token_ids[0].len();
        let mut flat = Vec::with_capacity(batch.masked_positions.len());
        for &(row, pos) in &batch.masked_positions {
            if row >= batch.token_ids.len() || pos >= s {
                return Err(Error::Data(format!("masked position ({row}, {pos}) outside batch")));
            }
            flat.push(row * s + pos);
        }
        let logits = self.mlm_logits(tape, &enc.binding, enc.trace.hidden, &flat)?;
        let ce = tape.cross_entropy_sum(logits, &batch.masked_labels)?;
        let loss = tape.scale(ce, 1.0 / batch.masked_labels.len() as f64);
        Ok(MlmRun { enc, logits, loss })
    }
}

/// Additive attention bias `[b, 1, s]`: 0 at real tokens, -1e9 at padding.
pub fn attention_mask_bias(input_mask: &[Vec<u8>], s: usize) -> Result<Tensor> {
    let b = input_mask.len();
    let mut data = Vec::with_capacity(b * s);
    for row in input_mask {
        for &m in row {
            data.push(if m == 0 { MASK_BIAS } else { 0.0 });
        }
    }
    Tensor::new(vec![b, 1, s], data)
}

/// Same bias expanded to `[b, s, s]` for the ablation that stores the mask
/// inside the propagated scores.
fn full_score_bias(input_mask: &[Vec<u8>], s: usize) -> Result<Tensor> {
    let b = input_mask.len();
    let mut data = Vec::with_capacity(b * s * s);
    for row in input_mask {
        for _ in 0..s {
            for &m in row {
                data.push(if m == 0 { MASK_BIAS } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![b, s, s], data)
}
