use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    batch_offset, broadcast_batch, matmul, mm_nt_acc, mm_tn_acc, next_index, transpose_last2,
    Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive bias used for attention masking. Large but finite so that masked
/// logits stay well-defined when residual scores are added on top.
pub const MASK_BIAS: f64 = -1e9;

enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f64 },
    Reshape { x: ValueId },
    ConcatCols { parts: Vec<ValueId> },
    GatherRows { table: ValueId, rows: Vec<usize> },
    SoftmaxRows { x: ValueId },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, xhat: Tensor, inv_std: Vec<f64> },
    Gelu { x: ValueId },
    Relu { x: ValueId },
    Dropout { x: ValueId, mask: Tensor },
    Sum { x: ValueId },
    CrossEntropySum { logits: ValueId, labels: Vec<usize>, probs: Tensor },
}

/// Gradient-recording arena. Every op appends one node whose inputs already
/// live on the tape, so node order is a topological order and one reverse
/// sweep computes all gradients. Rebuilt for every forward pass.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

/// Per-node gradients produced by [`Tape::backward`]; indexed by `ValueId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { ops: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.ops.push(op);
        self.values.push(value);
        ValueId(self.values.len() - 1)
    }

    /// Record an input value. Parameters and constants alike enter here; the
    /// caller keeps track of which ids it wants gradients for.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul { a, b }, out))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let out = transpose_last2(self.value(x))?;
        Ok(self.push(Op::Transpose { x }, out))
    }

    /// Elementwise add; `b` may also be a rank-1 row bias matching the last
    /// extent of `a`.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let mut data = ta.data().to_vec();
            for (d, &v) in data.iter_mut().zip(tb.data()) {
                *d += v;
            }
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.rank() == 1 && tb.last_dim() == ta.last_dim() {
            let n = ta.last_dim();
            let mut data = ta.data().to_vec();
            for (i, d) in data.iter_mut().enumerate() {
                *d += tb.data()[i % n];
            }
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        };
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, out)
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?} changes element count", t.shape()),
            });
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(Op::Reshape { x }, out))
    }

    /// Concatenate along the last axis; all parts share leading extents.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            detail: "no parts".into(),
        })?;
        let lead = self.value(first).shape()[..self.value(first).rank() - 1].to_vec();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("leading extents differ: {:?} vs {:?}", t.shape(), lead),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, out))
    }

    /// Select rows of a 2-D table; backward scatter-adds. Serves embedding
    /// lookup and masked-position selection.
    pub fn gather_rows(&mut self, table: ValueId, rows: &[usize]) -> Result<ValueId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("table must be 2-D, got {:?}", t.shape()),
            });
        }
        if rows.is_empty() {
            return Err(Error::Data("gather_rows: empty index list".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(Error::Data(format!("row index {r} out of range for table with {v} rows")));
            }
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(Op::GatherRows { table, rows: rows.to_vec() }, out))
    }

    /// Row softmax over the last axis with per-row max subtraction. `mask` is
    /// an optional additive bias (0 or [`MASK_BIAS`]) broadcast right-aligned
    /// over the leading extents; its last extent must equal the row length.
    pub fn softmax_rows(&mut self, x: ValueId, mask: Option<&Tensor>) -> Result<ValueId> {
        let t = self.value(x);
        let n = t.last_dim();
        let rows = t.row_count();
        let lead = &t.shape()[..t.rank() - 1];
        let mask_lead: Option<Vec<usize>> = match mask {
            Some(m) => {
                if m.last_dim() != n || m.rank() > t.rank() {
                    return Err(Error::Shape {
                        op: "softmax_rows",
                        detail: format!("mask {:?} does not fit input {:?}", m.shape(), t.shape()),
                    });
                }
                let ml = &m.shape()[..m.rank() - 1];
                let pad = lead.len() - ml.len();
                for (i, &d) in ml.iter().enumerate() {
                    if d != 1 && d != lead[pad + i] {
                        return Err(Error::Shape {
                            op: "softmax_rows",
                            detail: format!("mask {:?} does not broadcast over {:?}", m.shape(), t.shape()),
                        });
                    }
                }
                Some(ml.to_vec())
            }
            None => None,
        };
        let mut data = vec![0.0; t.numel()];
        let mut coords = vec![0usize; lead.len()];
        for r in 0..rows {
            let src = &t.data()[r * n..(r + 1) * n];
            let dst = &mut data[r * n..(r + 1) * n];
            match (&mask, &mask_lead) {
                (Some(m), Some(ml)) => {
                    let mo = batch_offset(&coords, ml, n);
                    let mrow = &m.data()[mo..mo + n];
                    for j in 0..n {
                        dst[j] = src[j] + mrow[j];
                    }
                }
                _ => dst.copy_from_slice(src),
            }
            let max = dst.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in dst.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
            if !lead.is_empty() {
                next_index(&mut coords, lead);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::SoftmaxRows { x }, out))
    }

    /// Layer normalization over the last axis with biased variance and `eps`
    /// inside the square root.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let h = t.last_dim();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [h] || b.shape() != [h] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("gamma {:?} / beta {:?} vs feature extent {h}", g.shape(), b.shape()),
            });
        }
        let rows = t.row_count();
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let src = &t.data()[r * h..(r + 1) * h];
            let mean = src.iter().sum::<f64>() / h as f64;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..h {
                let xh = (src[j] - mean) * inv;
                xhat[r * h + j] = xh;
                data[r * h + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let xhat = Tensor::new(t.shape().to_vec(), xhat)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, out))
    }

    /// Exact Gaussian-CDF GELU: x * Phi(x).
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v * gauss_cdf(v));
        self.push(Op::Gelu { x }, out)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, out)
    }

    /// Inverted dropout. With `rate == 0` or outside training this is an
    /// identity that records nothing and draws nothing from `rng`.
    pub fn dropout<R: Rng>(&mut self, x: ValueId, rate: f64, training: bool, rng: &mut R) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 || !training {
            return Ok(x);
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask_data: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(t.shape().to_vec(), mask_data)?;
        let data = t.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, out))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Summed cross-entropy of row softmax vs integer labels, fused for a
    /// numerically exact backward rule (softmax - one_hot).
    pub fn cross_entropy_sum(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "cross_entropy_sum",
                detail: format!("logits must be 2-D, got {:?}", t.shape()),
            });
        }
        let (n, v) = (t.shape()[0], t.shape()[1]);
        if labels.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_sum",
                detail: format!("{n} logit rows vs {} labels", labels.len()),
            });
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= v {
                return Err(Error::Data(format!("label {label} out of range for vocab {v}")));
            }
            let row = &t.data()[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= sum;
            }
            total += max + sum.ln() - row[label];
        }
        let probs = Tensor::new(vec![n, v], probs)?;
        let out = Tensor::scalar(total);
        Ok(self.push(Op::CrossEntropySum { logits, labels: labels.to_vec(), probs }, out))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate by sum at
    /// fan-out; every node reachable from `loss` gets exactly one finished
    /// gradient.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let g = match upper[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            // All inputs of node i have smaller indices, so they live in `lower`.
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Matmul { a, b } => self.backward_matmul(*a, *b, g, lower),
                Op::Transpose { x } => {
                    let gt = transpose_last2(g).expect("gradient shape mirrors forward");
                    acc_tensor(&mut lower[x.0], &gt, self.value(*x).shape());
                }
                Op::Add { a, b } => {
                    acc_tensor(&mut lower[a.0], g, self.value(*a).shape());
                    let tb = self.value(*b);
                    if tb.shape() == g.shape() {
                        acc_tensor(&mut lower[b.0], g, tb.shape());
                    } else {
                        let n = tb.last_dim();
                        let slot = lower[b.0].get_or_insert_with(|| Tensor::zeros(tb.shape()));
                        for (i, &gv) in g.data().iter().enumerate() {
                            slot.data_mut()[i % n] += gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc_with(&mut lower[a.0], ta.shape(), g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv));
                    acc_with(&mut lower[b.0], tb.shape(), g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av));
                }
                Op::Scale { x, c } => {
                    acc_with(&mut lower[x.0], self.value(*x).shape(), g.data().iter().map(|&gv| gv * c));
                }
                Op::Reshape { x } => {
                    acc_with(&mut lower[x.0], self.value(*x).shape(), g.data().iter().cloned());
                }
                Op::ConcatCols { parts } => {
                    let total = g.last_dim();
                    let rows = g.row_count();
                    let mut off = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let w = tp.last_dim();
                        let slot = lower[p.0].get_or_insert_with(|| Tensor::zeros(tp.shape()));
                        for r in 0..rows {
                            for j in 0..w {
                                slot.data_mut()[r * w + j] += g.data()[r * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::GatherRows { table, rows } => {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let slot = lower[table.0].get_or_insert_with(|| Tensor::zeros(tt.shape()));
                    for (r, &row) in rows.iter().enumerate() {
                        for j in 0..d {
                            slot.data_mut()[row * d + j] += g.data()[r * d + j];
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.values[i];
                    let n = y.last_dim();
                    let tx = self.value(*x);
                    let slot = lower[x.0].get_or_insert_with(|| Tensor::zeros(tx.shape()));
                    for r in 0..y.row_count() {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let s: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let dst = &mut slot.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let h = xhat.last_dim();
                    let gm = self.value(*gamma);
                    {
                        let slot = lower[gamma.0].get_or_insert_with(|| Tensor::zeros(gm.shape()));
                        for (i, &gv) in g.data().iter().enumerate() {
                            slot.data_mut()[i % h] += gv * xhat.data()[i];
                        }
                    }
                    {
                        let bt = self.value(*beta);
                        let slot = lower[beta.0].get_or_insert_with(|| Tensor::zeros(bt.shape()));
                        for (i, &gv) in g.data().iter().enumerate() {
                            slot.data_mut()[i % h] += gv;
                        }
                    }
                    let tx = self.value(*x);
                    let slot = lower[x.0].get_or_insert_with(|| Tensor::zeros(tx.shape()));
                    for r in 0..xhat.row_count() {
                        let gr = &g.data()[r * h..(r + 1) * h];
                        let xr = &xhat.data()[r * h..(r + 1) * h];
                        let mut mt = 0.0;
                        let mut mtx = 0.0;
                        let mut t = vec![0.0; h];
                        for j in 0..h {
                            t[j] = gr[j] * gm.data()[j];
                            mt += t[j];
                            mtx += t[j] * xr[j];
                        }
                        mt /= h as f64;
                        mtx /= h as f64;
                        let dst = &mut slot.data_mut()[r * h..(r + 1) * h];
                        for j in 0..h {
                            dst[j] += inv_std[r] * (t[j] - mt - xr[j] * mtx);
                        }
                    }
                }
                Op::Gelu { x } => {
                    let tx = self.value(*x);
                    acc_with(
                        &mut lower[x.0],
                        tx.shape(),
                        g.data().iter().zip(tx.data()).map(|(&gv, &xv)| gv * (gauss_cdf(xv) + xv * gauss_pdf(xv))),
                    );
                }
                Op::Relu { x } => {
                    let tx = self.value(*x);
                    acc_with(
                        &mut lower[x.0],
                        tx.shape(),
                        g.data().iter().zip(tx.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }),
                    );
                }
                Op::Dropout { x, mask } => {
                    let tx = self.value(*x);
                    acc_with(
                        &mut lower[x.0],
                        tx.shape(),
                        g.data().iter().zip(mask.data()).map(|(&gv, &mv)| gv * mv),
                    );
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    let tx = self.value(*x);
                    acc_with(&mut lower[x.0], tx.shape(), std::iter::repeat(gv).take(tx.numel()));
                }
                Op::CrossEntropySum { logits, labels, probs } => {
                    let gv = g.data()[0];
                    let v = probs.last_dim();
                    let tl = self.value(*logits);
                    let slot = lower[logits.0].get_or_insert_with(|| Tensor::zeros(tl.shape()));
                    for (r, &label) in labels.iter().enumerate() {
                        let dst = &mut slot.data_mut()[r * v..(r + 1) * v];
                        let pr = &probs.data()[r * v..(r + 1) * v];
                        for j in 0..v {
                            let one_hot = if j == label { 1.0 } else { 0.0 };
                            dst[j] += (pr[j] - one_hot) * gv;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_matmul(&self, a: ValueId, b: ValueId, g: &Tensor, lower: &mut [Option<Tensor>]) {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ab, m, k) = (&ta.shape()[..ta.rank() - 2], ta.shape()[ta.rank() - 2], ta.shape()[ta.rank() - 1]);
        let (bb, n) = (&tb.shape()[..tb.rank() - 2], tb.shape()[tb.rank() - 1]);
        let batch = broadcast_batch(ab, bb, "matmul").expect("checked in forward");
        if a != b {
            // Split borrow: handle the two input slots in separate passes.
            let mut da = lower[a.0].take().unwrap_or_else(|| Tensor::zeros(ta.shape()));
            let mut db = lower[b.0].take().unwrap_or_else(|| Tensor::zeros(tb.shape()));
            let mut idx = vec![0usize; batch.len()];
            loop {
                let ao = batch_offset(&idx, ab, m * k);
                let bo = batch_offset(&idx, bb, k * n);
                let go = batch_offset(&idx, &batch, m * n);
                let gb = &g.data()[go..go + m * n];
                mm_nt_acc(gb, &tb.data()[bo..bo + k * n], &mut da.data_mut()[ao..ao + m * k], m, n, k);
                mm_tn_acc(&ta.data()[ao..ao + m * k], gb, &mut db.data_mut()[bo..bo + k * n], m, k, n);
                if batch.is_empty() || !next_index(&mut idx, &batch) {
                    break;
                }
            }
            lower[a.0] = Some(da);
            lower[b.0] = Some(db);
        } else {
            let mut da = lower[a.0].take().unwrap_or_else(|| Tensor::zeros(ta.shape()));
            let mut idx = vec![0usize; batch.len()];
            loop {
                let ao = batch_offset(&idx, ab, m * k);
                let go = batch_offset(&idx, &batch, m * n);
                let gb = &g.data()[go..go + m * n];
                mm_nt_acc(gb, &tb.data()[ao..ao + k * n], &mut da.data_mut()[ao..ao + m * k], m, n, k);
                mm_tn_acc(&ta.data()[ao..ao + m * k], gb, &mut da.data_mut()[ao..ao + k * n], m, k, n);
                if batch.is_empty() || !next_index(&mut idx, &batch) {
                    break;
                }
            }
            lower[a.0] = Some(da);
        }
    }
}

fn acc_tensor(slot: &mut Option<Tensor>, g: &Tensor, shape: &[usize]) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    for (d, &v) in t.data_mut().iter_mut().zip(g.data()) {
        *d += v;
    }
}

fn acc_with(slot: &mut Option<Tensor>, shape: &[usize], values: impl Iterator<Item = f64>) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    for (d, v) in t.data_mut().iter_mut().zip(values) {
        *d += v;
    }
}

pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Central finite differences of a scalar function, step h per coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
