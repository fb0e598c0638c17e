use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionParams, AttentionScores, Combine};
use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PostLn,
    PreLn,
    Realformer,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PostLn => "post_ln",
            Variant::PreLn => "pre_ln",
            Variant::Realformer => "realformer",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "post_ln" => Some(Variant::PostLn),
            "pre_ln" => Some(Variant::PreLn),
            "realformer" => Some(Variant::Realformer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    None,
    Sum,
    RunningMean,
}

impl ResidualMode {
    pub fn name(self) -> &'static str {
        match self {
            ResidualMode::None => "none",
            ResidualMode::Sum => "sum",
            ResidualMode::RunningMean => "running_mean",
        }
    }

    pub fn parse(s: &str) -> Option<ResidualMode> {
        match s {
            "none" => Some(ResidualMode::None),
            "sum" => Some(ResidualMode::Sum),
            "running_mean" => Some(ResidualMode::RunningMean),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: ValueId) -> ValueId {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Tape handles for one layer's parameters.
pub struct LayerParamIds {
    pub attention: AttentionParams,
    pub attn_ln: (ValueId, ValueId),
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
    pub ffn_ln: (ValueId, ValueId),
}

/// Dropout settings threaded through a forward pass.
#[derive(Clone, Copy)]
pub struct DropSpec {
    pub rate: f64,
    pub training: bool,
}

/// Position-wise feed-forward: act(x W1 + b1) W2 + b2.
pub fn ffn(tape: &mut Tape, x: ValueId, p: &LayerParamIds, act: Activation) -> Result<ValueId> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = act.apply(tape, h);
    let o = tape.matmul(h, p.w2)?;
    tape.add(o, p.b2)
}

/// Post-LN wiring: LN sits after each residual addition.
#[allow(clippy::too_many_arguments)]
pub fn post_ln_layer<R: Rng>(
    tape: &mut Tape,
    x: ValueId,
    p: &LayerParamIds,
    mask: Option<&Tensor>,
    act: Activation,
    drop: DropSpec,
    rng: &mut R,
) -> Result<(ValueId, Vec<ValueId>)> {
    let (mh, _, probs) = multi_head(
        tape, x, x, x, &p.attention, mask, None, |_| Combine::Off, None, drop.rate, drop.training, rng,
    )?;
    let mh = tape.dropout(mh, drop.rate, drop.training, rng)?;
    let sum = tape.add(x, mh)?;
    let h = tape.layer_norm(sum, p.attn_ln.0, p.attn_ln.1, LN_EPS)?;
    let f = ffn(tape, h, p, act)?;
    let f = tape.dropout(f, drop.rate, drop.training, rng)?;
    let sum2 = tape.add(h, f)?;
    let out = tape.layer_norm(sum2, p.ffn_ln.0, p.ffn_ln.1, LN_EPS)?;
    Ok((out, probs))
}

/// Pre-LN wiring: LN on sub-layer inputs, un-normalized residual path.
#[allow(clippy::too_many_arguments)]
pub fn pre_ln_layer<R: Rng>(
    tape: &mut Tape,
    x: ValueId,
    p: &LayerParamIds,
    mask: Option<&Tensor>,
    act: Activation,
    drop: DropSpec,
    rng: &mut R,
) -> Result<(ValueId, Vec<ValueId>)> {
    let a_in = tape.layer_norm(x, p.attn_ln.0, p.attn_ln.1, LN_EPS)?;
    let (mh, _, probs) = multi_head(
        tape, a_in, a_in, a_in, &p.attention, mask, None, |_| Combine::Off, None, drop.rate, drop.training, rng,
    )?;
    let mh = tape.dropout(mh, drop.rate, drop.training, rng)?;
    let x1 = tape.add(x, mh)?;
    let f_in = tape.layer_norm(x1, p.ffn_ln.0, p.ffn_ln.1, LN_EPS)?;
    let f = ffn(tape, f_in, p, act)?;
    let f = tape.dropout(f, drop.rate, drop.training, rng)?;
    let x2 = tape.add(x1, f)?;
    Ok((x2, probs))
}

/// Post-LN wiring with the residual score skip edge. `prev` must be absent
/// exactly at `layer_index == 1`; the returned scores are what the next
/// layer receives.
#[allow(clippy::too_many_arguments)]
pub fn realformer_layer<R: Rng>(
    tape: &mut Tape,
    x: ValueId,
    prev: Option<&AttentionScores>,
    p: &LayerParamIds,
    mask: Option<&Tensor>,
    mode: ResidualMode,
    layer_index: usize,
    score_mask: Option<ValueId>,
    act: Activation,
    drop: DropSpec,
    rng: &mut R,
) -> Result<(ValueId, AttentionScores, Vec<ValueId>)> {
    if layer_index == 1 && prev.is_some() {
        return Err(Error::Usage("layer 1 takes no previous scores".into()));
    }
    if layer_index > 1 && prev.is_none() {
        return Err(Error::Usage(format!("layer {layer_index} needs previous scores")));
    }
    let combine = move |prev_id: ValueId| match mode {
        // Unreachable through the encoder (mode none never threads scores);
        // treat a direct call as plain sum-free attention.
        ResidualMode::None => Combine::Off,
        ResidualMode::Sum => Combine::Sum(prev_id),
        ResidualMode::RunningMean => Combine::RunningMean { prev: prev_id, layer_index },
    };
    let (mh, scores, probs) = multi_head(
        tape, x, x, x, &p.attention, mask, prev, combine, score_mask, drop.rate, drop.training, rng,
    )?;
    let mh = tape.dropout(mh, drop.rate, drop.training, rng)?;
    let sum = tape.add(x, mh)?;
    let h = tape.layer_norm(sum, p.attn_ln.0, p.attn_ln.1, LN_EPS)?;
    let f = ffn(tape, h, p, act)?;
    let f = tape.dropout(f, drop.rate, drop.training, rng)?;
    let sum2 = tape.add(h, f)?;
    let out = tape.layer_norm(sum2, p.ffn_ln.0, p.ffn_ln.1, LN_EPS)?;
    Ok((out, scores, probs))
}

/// Everything downstream consumers need from a stacked forward pass: the
/// final hidden states, the same before the Pre-LN top normalization, each
/// layer's input (for recomputation oracles), per-layer pre-dropout
/// attention probabilities, and the residual score stream (RealFormer only).
pub struct EncoderTrace {
    pub hidden: ValueId,
    pub pre_final_hidden: ValueId,
    pub layer_inputs: Vec<ValueId>,
    pub probs: Vec<Vec<ValueId>>,
    pub scores: Vec<Vec<ValueId>>,
}

/// Stack `layers` with the chosen wiring. `final_ln` is required for Pre-LN
/// and rejected otherwise. `ablate_score_residual` replaces every threaded
/// score block with a fresh zero leaf, turning RealFormer into a graph that
/// must match Post-LN bitwise.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<R: Rng>(
    tape: &mut Tape,
    x0: ValueId,
    variant: Variant,
    mode: ResidualMode,
    layers: &[LayerParamIds],
    final_ln: Option<(ValueId, ValueId)>,
    mask: Option<&Tensor>,
    score_mask: Option<ValueId>,
    act: Activation,
    drop: DropSpec,
    rng: &mut R,
    ablate_score_residual: bool,
) -> Result<EncoderTrace> {
    match (variant, final_ln.is_some()) {
        (Variant::PreLn, false) => return Err(Error::Config("pre_ln needs final layer-norm parameters".into())),
        (Variant::PostLn | Variant::Realformer, true) => {
            return Err(Error::Config(format!("{} takes no final layer-norm", variant.name())))
        }
        _ => {}
    }
    if variant == Variant::Realformer && mode == ResidualMode::None {
        return Err(Error::Config("realformer requires residual_mode sum or running_mean".into()));
    }
    let mut x = x0;
    let mut layer_inputs = Vec::with_capacity(layers.len());
    let mut probs_all = Vec::with_capacity(layers.len());
    let mut scores_all = Vec::new();
    let mut prev: Option<AttentionScores> = None;
    for (i, p) in layers.iter().enumerate() {
        layer_inputs.push(x);
        let (next, probs) = match variant {
            Variant::PostLn => post_ln_layer(tape, x, p, mask, act, drop, rng)?,
            Variant::PreLn => pre_ln_layer(tape, x, p, mask, act, drop, rng)?,
            Variant::Realformer => {
                let layer_index = i + 1;
                let zeros;
                let prev_ref = if ablate_score_residual && layer_index > 1 {
                    zeros = zero_scores(tape, x, p.attention.heads);
                    Some(&zeros)
                } else {
                    prev.as_ref()
                };
                let (next, scores, probs) = realformer_layer(
                    tape, x, prev_ref, p, mask, mode, layer_index, score_mask, act, drop, rng,
                )?;
                scores_all.push(scores.heads.clone());
                prev = Some(scores);
                (next, probs)
            }
        };
        probs_all.push(probs);
        x = next;
    }
    let pre_final = x;
    if let Some((gamma, beta)) = final_ln {
        x = tape.layer_norm(x, gamma, beta, LN_EPS)?;
    }
    Ok(EncoderTrace {
        hidden: x,
        pre_final_hidden: pre_final,
        layer_inputs,
        probs: probs_all,
        scores: scores_all,
    })
}

fn zero_scores(tape: &mut Tape, x: ValueId, heads: usize) -> AttentionScores {
    let xs = tape.value(x).shape().to_vec();
    let seq = xs[xs.len() - 2];
    let mut shape = xs[..xs.len() - 2].to_vec();
    shape.push(seq);
    shape.push(seq);
    let ids = (0..heads).map(|_| tape.leaf(Tensor::zeros(&shape))).collect();
    AttentionScores { heads: ids }
}
