use crate::error::{Error, Result};

/// Dense row-major array of f64 with shape metadata. The only numeric carrier
/// in the crate; every extent is positive, so `numel == data.len()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("extents are never empty")
    }

    /// Number of length-`last_dim` rows when the tensor is viewed as 2-D.
    pub fn row_count(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality; distinguishes 0.0 from -0.0 and treats equal NaN
    /// payloads as equal, which value comparison would not.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Split a shape into (batch extents, m, k) for matmul-style ops.
fn split_matrix(shape: &[usize], op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape {
            op,
            detail: format!("need rank >= 2, got {shape:?}"),
        });
    }
    let (batch, mat) = shape.split_at(shape.len() - 2);
    Ok((batch.to_vec(), mat[0], mat[1]))
}

/// Broadcast two batch-extent lists right-aligned; a missing or size-1 extent
/// stretches to the other side's extent.
pub(crate) fn broadcast_batch(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape {
                op,
                detail: format!("batch extents {a:?} and {b:?} do not broadcast"),
            });
        }
        out.push(da.max(db));
    }
    Ok(out)
}

/// Offset of batch index `idx` (coordinates in the broadcast shape) inside a
/// tensor whose own batch extents are `dims`; broadcast axes contribute 0.
pub(crate) fn batch_offset(idx: &[usize], dims: &[usize], block: usize) -> usize {
    let pad = idx.len() - dims.len();
    let mut off = 0;
    for (i, &d) in dims.iter().enumerate() {
        let coord = if d == 1 { 0 } else { idx[pad + i] };
        off = off * d + coord;
    }
    off * block
}

pub(crate) fn next_index(idx: &mut [usize], dims: &[usize]) -> bool {
    for i in (0..dims.len()).rev() {
        idx[i] += 1;
        if idx[i] < dims[i] {
            return true;
        }
        idx[i] = 0;
    }
    false
}

/// c += a . b for row-major 2-D blocks; k-outer loop keeps the inner stride 1.
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a . b^T where a is m x n and b is k x n; rows dot rows.
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            crow[p] += s;
        }
    }
}

/// c += a^T . b where a is m x k and b is m x n; c is k x n.
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Batched matmul with right-aligned batch broadcasting.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ab, m, ka) = split_matrix(a.shape(), "matmul")?;
    let (bb, kb, n) = split_matrix(b.shape(), "matmul")?;
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let batch = broadcast_batch(&ab, &bb, "matmul")?;
    let mut shape = batch.clone();
    shape.push(m);
    shape.push(n);
    let mut out = Tensor::zeros(&shape);
    let mut idx = vec![0usize; batch.len()];
    loop {
        let ao = batch_offset(&idx, &ab, m * ka);
        let bo = batch_offset(&idx, &bb, ka * n);
        let co = batch_offset(&idx, &batch, m * n);
        mm_nn_acc(
            &a.data()[ao..ao + m * ka],
            &b.data()[bo..bo + ka * n],
            &mut out.data_mut()[co..co + m * n],
            m,
            ka,
            n,
        );
        if batch.is_empty() || !next_index(&mut idx, &batch) {
            break;
        }
    }
    Ok(out)
}

/// Swap the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let (batch, m, n) = split_matrix(x.shape(), "transpose")?;
    let mut shape = batch.clone();
    shape.push(n);
    shape.push(m);
    let mut out = Tensor::zeros(&shape);
    let block = m * n;
    let batches = x.numel() / block;
    for bi in 0..batches {
        let src = &x.data()[bi * block..(bi + 1) * block];
        let dst = &mut out.data_mut()[bi * block..(bi + 1) * block];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Ok(out)
}
