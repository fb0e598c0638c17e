use rand::Rng;

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-head projection handles plus the shared output projection. Heads are
/// kept as separate matrices so the residual score stream can slice per head
/// without reshape gymnastics.
pub struct AttentionParams {
    pub wq: Vec<ValueId>,
    pub wk: Vec<ValueId>,
    pub wv: Vec<ValueId>,
    pub wo: ValueId,
    pub heads: usize,
    pub d_k: usize,
}

/// The propagated residual stream: one pre-softmax score block per head,
/// each shaped `[..., from_len, to_len]`. Mask bias is never folded in (see
/// `residual_includes_mask` for the explicit ablation), so entries stay at
/// raw-score magnitude no matter how deep the stack is.
#[derive(Clone)]
pub struct AttentionScores {
    pub heads: Vec<ValueId>,
}

impl AttentionScores {
    /// Materialize one example's scores as a `(heads, from, to)` tensor.
    /// Expects singleton batch extents.
    pub fn to_tensor(&self, tape: &Tape) -> Result<Tensor> {
        let first = tape.value(self.heads[0]);
        let rank = first.rank();
        let (from, to) = (first.shape()[rank - 2], first.shape()[rank - 1]);
        if first.numel() != from * to {
            return Err(Error::Shape {
                op: "scores_to_tensor",
                detail: format!("expected singleton batch, got {:?}", first.shape()),
            });
        }
        let mut data = Vec::with_capacity(self.heads.len() * from * to);
        for &h in &self.heads {
            data.extend_from_slice(tape.value(h).data());
        }
        Tensor::new(vec![self.heads.len(), from, to], data)
    }
}

/// How the previous layer's scores fold into this layer's raw scores.
#[derive(Clone, Copy)]
pub enum Combine {
    /// No residual stream (first layer, or baseline wirings).
    Off,
    /// logits = raw + prev; the sum is what propagates.
    Sum(ValueId),
    /// logits = ((l-1) * prev + raw) / l for 1-based layer index l; the mean
    /// itself both feeds the softmax and propagates.
    RunningMean { prev: ValueId, layer_index: usize },
}

/// One head of scaled dot-product attention with the optional residual score
/// stream. Returns `(context, scores, probs)` where `scores` is the
/// post-combination, mask-free block that the next layer receives and
/// `probs` is the pre-dropout attention distribution for analysis.
///
/// `mask` is an additive key bias (0 or -1e9) applied after the residual
/// combination, only inside the softmax. `score_mask` switches on the
/// ablation that folds the bias into the propagated scores instead.
#[allow(clippy::too_many_arguments)]
pub fn scaled_dot_attention<R: Rng>(
    tape: &mut Tape,
    qp: ValueId,
    kp: ValueId,
    vp: ValueId,
    mask: Option<&Tensor>,
    combine: Combine,
    score_mask: Option<ValueId>,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(ValueId, ValueId, ValueId)> {
    let d_k = tape.value(qp).last_dim();
    let kt = tape.transpose(kp)?;
    let raw = tape.matmul(qp, kt)?;
    let raw = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    let scores = match combine {
        Combine::Off => raw,
        Combine::Sum(prev) => {
            check_prev_shape(tape, raw, prev)?;
            tape.add(raw, prev)?
        }
        Combine::RunningMean { prev, layer_index } => {
            check_prev_shape(tape, raw, prev)?;
            let l = layer_index as f64;
            let kept = tape.scale(prev, (l - 1.0) / l);
            let fresh = tape.scale(raw, 1.0 / l);
            tape.add(kept, fresh)?
        }
    };
    let (scores, probs) = match score_mask {
        // Ablation path: bias becomes part of the propagated scores.
        Some(bias) => {
            let masked = tape.add(scores, bias)?;
            (masked, tape.softmax_rows(masked, None)?)
        }
        None => (scores, tape.softmax_rows(scores, mask)?),
    };
    let dropped = tape.dropout(probs, dropout_rate, training, rng)?;
    let ctx = tape.matmul(dropped, vp)?;
    Ok((ctx, scores, probs))
}

fn check_prev_shape(tape: &Tape, raw: ValueId, prev: ValueId) -> Result<()> {
    let (r, p) = (tape.value(raw), tape.value(prev));
    if r.shape() != p.shape() {
        return Err(Error::Shape {
            op: "residual_scores",
            detail: format!("prev {:?} vs raw scores {:?}", p.shape(), r.shape()),
        });
    }
    Ok(())
}

/// Multi-head attention: per-head projections, per-head residual score
/// combination, concatenation, and the output projection. Returns the
/// projected output, the propagated score stream, and per-head pre-dropout
/// probabilities.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<R: Rng>(
    tape: &mut Tape,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    params: &AttentionParams,
    mask: Option<&Tensor>,
    prev: Option<&AttentionScores>,
    combine_prev: impl Fn(ValueId) -> Combine,
    score_mask: Option<ValueId>,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(ValueId, AttentionScores, Vec<ValueId>)> {
    if let Some(p) = prev {
        if p.heads.len() != params.heads {
            return Err(Error::Shape {
                op: "multi_head",
                detail: format!("prev has {} heads, attention has {}", p.heads.len(), params.heads),
            });
        }
    }
    let mut ctxs = Vec::with_capacity(params.heads);
    let mut scores = Vec::with_capacity(params.heads);
    let mut probs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qp = tape.matmul(q, params.wq[h])?;
        let kp = tape.matmul(k, params.wk[h])?;
        let vp = tape.matmul(v, params.wv[h])?;
        let combine = match prev {
            Some(p) => combine_prev(p.heads[h]),
            None => Combine::Off,
        };
        let (ctx, sc, pr) =
            scaled_dot_attention(tape, qp, kp, vp, mask, combine, score_mask, dropout_rate, training, rng)?;
        ctxs.push(ctx);
        scores.push(sc);
        probs.push(pr);
    }
    let concat = tape.concat_cols(&ctxs)?;
    let out = tape.matmul(concat, params.wo)?;
    Ok((out, AttentionScores { heads: scores }, probs))
}
