//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every executed operation in order; [`Tape::backward`]
//! replays the record in exact reverse order and accumulates gradients
//! additively, so a value feeding two consumers receives the sum of both
//! path gradients. Tensors are immutable once created except for the grad
//! slot. Everything is 64-bit and single-threaded, so a seeded forward
//! pass is bit-reproducible.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major tensor value stored on a [`Tape`].
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// c = a[m,k] · b[k,n]
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// c = a[m,k] · b[n,k]ᵀ (linear layer with weights stored [out, in])
    MatMulNT { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    /// rows of a [r,c] plus a length-c vector
    AddRow { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Relu { a: TensorId },
    Log { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    GatherRows { table: TensorId, ids: Vec<usize> },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    NarrowCols { a: TensorId, start: usize, len: usize },
    NarrowRows { a: TensorId, start: usize, len: usize },
    Transpose { a: TensorId },
    /// mask entries are 0.0 (dropped) or 1/(1-p) (kept)
    Dropout { a: TensorId, mask: Vec<f64> },
    Sum { a: TensorId },
    Mean { a: TensorId },
}

/// Ordered record of executed operations plus their results.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

// ── raw matmul kernels ──────────────────────────────────────────────

/// out += a[m,k] · b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "data length must equal product of shape");
        assert!(shape.iter().all(|&d| d > 0), "shape extents must be positive");
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Leaf that never requires a gradient (masks, targets, constants).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(op);
        id
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::InvalidAxis { op, axis: 2, shape: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// Standard matrix product a[m,k] · b[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], false, Op::MatMul { a, b, m, k, n }))
    }

    /// a[m,k] · b[n,k]ᵀ; the linear-layer product for weights stored [out, in].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], false, Op::MatMulNT { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, false, Op::Add { a, b }))
    }

    /// Broadcast a length-c vector across the rows of a [r,c] matrix.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (_, c) = self.dims2(a, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bias_data = self.value(bias).to_vec();
        let data: Vec<f64> = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&bias_data).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, false, Op::AddRow { a, bias }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, false, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, false, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, false, Op::Relu { a })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, false, Op::Log { a })
    }

    /// Numerically stable softmax along `axis`. Entries may be -inf
    /// (masked out); each slice must keep at least one finite entry.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { op: "softmax", axis, shape });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    max = max.max(src[at(j)]);
                }
                debug_assert!(max > f64::NEG_INFINITY, "softmax slice fully masked");
                let mut denom = 0.0;
                for j in 0..axis_len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= denom;
                }
            }
        }
        Ok(self.push(out, shape, false, Op::Softmax { a, axis }))
    }

    /// Stable log-softmax along the last axis of a 2-D tensor.
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "log_softmax")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        Ok(self.push(out, vec![r, c], false, Op::LogSoftmax { a }))
    }

    /// Per-position normalization over the last axis: zero mean, unit
    /// variance (denominator sqrt(var + eps)), then elementwise affine.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm input must have at least one axis");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x);
        let gain_v = self.value(gain).to_vec();
        let bias_v = self.value(bias).to_vec();
        let mut out = vec![0.0; src.len()];
        for (row, out_row) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_std * gain_v[j] + bias_v[j];
            }
        }
        Ok(self.push(out, self.shape(x).to_vec(), false, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Select rows of an embedding table: table[V,D], ids → [len(ids), D].
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab_size: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rows = ids.len();
        Ok(self.push(out, vec![rows, d], false, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Concatenate 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(out, vec![rows, total], false, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Concatenate 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(out, vec![rows, cols], false, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Column slice [start, start+len) of a 2-D tensor.
    pub fn narrow_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "narrow_cols")?;
        if start + len > cols || len == 0 {
            return Err(Error::InvalidAxis { op: "narrow_cols", axis: start + len, shape: vec![rows, cols] });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(out, vec![rows, len], false, Op::NarrowCols { a, start, len }))
    }

    /// Row slice [start, start+len) of a 2-D tensor.
    pub fn narrow_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "narrow_rows")?;
        if start + len > rows || len == 0 {
            return Err(Error::InvalidAxis { op: "narrow_rows", axis: start + len, shape: vec![rows, cols] });
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(out, vec![len, cols], false, Op::NarrowRows { a, start, len }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(out, vec![cols, rows], false, Op::Transpose { a }))
    }

    /// Inverted dropout with keep probability 1-p; identity when p == 0.
    /// The mask is drawn from `rng`, so a fixed seed reproduces the run.
    pub fn dropout<R: Rng>(&mut self, a: TensorId, p: f64, rng: &mut R) -> TensorId {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if p == 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.tensor(a).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, false, Op::Dropout { a, mask })
    }

    /// Sum of all entries, as a [1] scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![s], vec![1], false, Op::Sum { a })
    }

    /// Mean of all entries, as a [1] scalar.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.tensor(a).numel() as f64;
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![s / n], vec![1], false, Op::Mean { a })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every tensor reachable from the
    /// loss ends up with dloss/dtensor in its grad slot; contributions
    /// from multiple consumers accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        for t in &mut self.tensors {
            t.grad = Some(vec![0.0; t.data.len()]);
        }
        self.tensors[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.ops.len()).rev() {
            let grad = match self.tensors[i].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            match self.ops[i].clone() {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let mut da = vec![0.0; m * k];
                    mm_nt(&grad, self.value(b), m, n, k, &mut da);
                    let mut db = vec![0.0; k * n];
                    mm_tn(self.value(a), &grad, m, k, n, &mut db);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatMulNT { a, b, m, k, n } => {
                    // c = a·bᵀ: dA = dC·B, dB = dCᵀ·A
                    let mut da = vec![0.0; m * k];
                    mm_nn(&grad, self.value(b), m, n, k, &mut da);
                    let mut db = vec![0.0; n * k];
                    mm_tn(&grad, self.value(a), m, n, k, &mut db);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddRow { a, bias } => {
                    self.accumulate(a, &grad);
                    let c = self.tensor(bias).numel();
                    let mut db = vec![0.0; c];
                    for row in grad.chunks_exact(c) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(bias, &db);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = grad.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = grad.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.value(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Log { a } => {
                    let da: Vec<f64> = grad.iter().zip(self.value(a)).map(|(g, x)| g / x).collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax { a, axis } => {
                    let shape = self.shape(i_id(i)).to_vec();
                    let axis_len = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let out = self.value(i_id(i));
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                dot += grad[at(j)] * out[at(j)];
                            }
                            for j in 0..axis_len {
                                da[at(j)] = out[at(j)] * (grad[at(j)] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LogSoftmax { a } => {
                    // dx = dy - softmax(x) * sum(dy) per row
                    let shape = self.shape(i_id(i)).to_vec();
                    let c = shape[1];
                    let out = self.value(i_id(i));
                    let mut da = vec![0.0; out.len()];
                    for (r, grow) in grad.chunks_exact(c).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            da[r * c + j] = grow[j] - out[r * c + j].exp() * gsum;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let src = self.value(x).to_vec();
                    let gain_v = self.value(gain).to_vec();
                    let mut dx = vec![0.0; src.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for (row_idx, (row, grow)) in src.chunks_exact(d).zip(grad.chunks_exact(d)).enumerate() {
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = grow.iter().zip(&gain_v).map(|(g, w)| g * w).collect();
                        let dxhat_sum: f64 = dxhat.iter().sum();
                        let dxhat_dot: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dx[row_idx * d + j] =
                                inv_std / df * (df * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::GatherRows { table, ids } => {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0; self.tensor(table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &grad[r * d..(r + 1) * d]);
                    }
                    self.accumulate(table, &dt);
                }
                Op::ConcatCols { parts } => {
                    let total = self.shape(i_id(i))[1];
                    let rows = self.shape(i_id(i))[0];
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let cols = self.shape(i_id(i))[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let r = self.shape(p)[0];
                        let dp = grad[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(p, &dp);
                        offset += r;
                    }
                }
                Op::NarrowCols { a, start, len } => {
                    let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    self.accumulate(a, &da);
                }
                Op::NarrowRows { a, start, len } => {
                    let cols = self.shape(a)[1];
                    let mut da = vec![0.0; self.tensor(a).numel()];
                    da[start * cols..(start + len) * cols].copy_from_slice(&grad);
                    self.accumulate(a, &da);
                }
                Op::Transpose { a } => {
                    let (rows, cols) = (self.shape(i_id(i))[0], self.shape(i_id(i))[1]);
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[c * rows + r] = grad[r * cols + c];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Dropout { a, mask } => {
                    let da: Vec<f64> = grad.iter().zip(&mask).map(|(g, m)| g * m).collect();
                    self.accumulate(a, &da);
                }
                Op::Sum { a } => {
                    let g = grad[0];
                    let da = vec![g; self.tensor(a).numel()];
                    self.accumulate(a, &da);
                }
                Op::Mean { a } => {
                    let n = self.tensor(a).numel();
                    let g = grad[0] / n as f64;
                    let da = vec![g; n];
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, src: &[f64]) {
        let grad = self.tensors[id.0].grad.get_or_insert_with(|| vec![0.0; src.len()]);
        add_into(grad, src);
    }
}

fn i_id(i: usize) -> TensorId {
    TensorId(i)
}
