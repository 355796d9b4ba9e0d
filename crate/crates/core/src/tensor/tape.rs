//! Reverse-mode differentiation tape.
//!
//! Forward ops append nodes in creation order, so the reversed record is a
//! topological order and `backward` visits each node exactly once. Values are
//! immutable once pushed; a tape is confined to one thread.

use std::collections::HashMap;

use super::ndarray::{mm_nn, mm_nt, mm_tn, NdArray};
use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Probability floor used by the cross-entropy ops.
pub const PROB_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    DivElem(Var, Var),
    AddRow(Var, Var),
    RowScale(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Matmul(Var, Var),
    MatmulTn(Var, Var),
    MatmulNt(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmaxRows { x: Var, mask: Vec<f64> },
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CrossEntropy { probs: Var, targets: Vec<usize> },
    Bce { probs: Var, targets: Vec<f64> },
}

pub struct Tape {
    values: Vec<NdArray>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    bound: Vec<(ParamId, Var)>,
    lookup: HashMap<usize, Var>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), grads: Vec::new(), ops: Vec::new(), bound: Vec::new(), lookup: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.values[v.0]
    }

    /// Gradient of a node, if any flowed into it during `backward`.
    pub fn grad(&self, v: Var) -> Option<NdArray> {
        self.grads[v.0]
            .as_ref()
            .map(|g| NdArray::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: NdArray, op: Op) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        let id = self.values.len();
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        Ok(Var(id))
    }

    pub fn leaf(&mut self, value: NdArray) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(Op::Leaf);
        Var(id)
    }

    /// Bind a stored parameter as a leaf; repeated binds of the same id on
    /// this tape return the same node so shared weights accumulate one grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.lookup.get(&id.index()) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.lookup.insert(id.index(), v);
        self.bound.push((id, v));
        v
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    // ── Elementwise and broadcast ops ───────────────────────────────

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::MulElem(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::DivElem(a, b))
    }

    /// x (n rows) + b broadcast across rows; b length must equal the column count.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xa, ba) = (self.value(x), self.value(b));
        if ba.rank() != 1 || ba.len() != xa.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", xa.shape(), ba.shape())));
        }
        let cols = xa.cols();
        let mut data = xa.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(ba.data()) {
                *v += bv;
            }
        }
        let shape = xa.shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::AddRow(x, b))
    }

    /// Scale row i by constant w[i].
    pub fn row_scale(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let xa = self.value(x);
        if w.len() != xa.rows() {
            return Err(Error::shape("row_scale", format!("{} weights vs {} rows", w.len(), xa.rows())));
        }
        let cols = xa.cols();
        let mut data = xa.data().to_vec();
        for (i, row) in data.chunks_mut(cols).enumerate() {
            for v in row.iter_mut() {
                *v *= w[i];
            }
        }
        let shape = xa.shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::RowScale(x, w.to_vec()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x, c))
    }

    // ── Matrix products ─────────────────────────────────────────────

    fn mm_dims(&self, op: &'static str, a: Var, b: Var, ka: usize, kb: usize) -> Result<()> {
        if ka != kb {
            return Err(Error::shape(
                op,
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    /// A[m,k] · B[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (kb, n) = (self.value(b).rows(), self.value(b).cols());
        self.mm_dims("matmul", a, b, k, kb)?;
        let data = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(NdArray::new(vec![m, n], data)?, Op::Matmul(a, b))
    }

    /// Aᵀ · B with A[k,m], B[k,n]
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, m) = (self.value(a).rows(), self.value(a).cols());
        let (kb, n) = (self.value(b).rows(), self.value(b).cols());
        self.mm_dims("matmul_tn", a, b, ka, kb)?;
        let data = mm_tn(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.push(NdArray::new(vec![m, n], data)?, Op::MatmulTn(a, b))
    }

    /// A · Bᵀ with A[m,k], B[n,k]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = (self.value(a).rows(), self.value(a).cols());
        let (n, kb) = (self.value(b).rows(), self.value(b).cols());
        self.mm_dims("matmul_nt", a, b, ka, kb)?;
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.push(NdArray::new(vec![m, n], data)?, Op::MatmulNt(a, b))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(out, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Ln(x))
    }

    // ── Softmax family ──────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xa = self.value(x);
        if axis >= xa.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", xa.rank())));
        }
        let (outer, alen, inner) = axis_split(xa.shape(), axis);
        let mut data = xa.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..alen {
                    mx = mx.max(data[base + a * inner]);
                }
                let mut sum = 0.0;
                for a in 0..alen {
                    let e = (data[base + a * inner] - mx).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..alen {
                    data[base + a * inner] /= sum;
                }
            }
        }
        let shape = xa.shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::Softmax { x, axis })
    }

    /// Row-wise softmax over the columns where mask is nonzero; masked
    /// columns get weight exactly zero and receive zero gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xa = self.value(x);
        let cols = xa.cols();
        if mask.len() != cols {
            return Err(Error::shape("masked_softmax_rows", format!("{} mask vs {} cols", mask.len(), cols)));
        }
        if mask.iter().all(|&m| m == 0.0) {
            return Err(Error::InvalidArg("masked_softmax_rows: all keys masked".into()));
        }
        let mut data = xa.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mut mx = f64::NEG_INFINITY;
            for (v, &m) in row.iter().zip(mask) {
                if m != 0.0 {
                    mx = mx.max(*v);
                }
            }
            let mut sum = 0.0;
            for (v, &m) in row.iter_mut().zip(mask) {
                if m != 0.0 {
                    *v = (*v - mx).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = xa.shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::MaskedSoftmaxRows { x, mask: mask.to_vec() })
    }

    // ── Normalization, dropout ──────────────────────────────────────

    /// Per-row normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xa = self.value(x);
        let d = xa.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must have length {d}"),
            ));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = xa.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let shape = xa.shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::LayerNormRows { x, gain, bias, eps })
    }

    /// Inverted dropout: surviving entries scaled by 1/(1-p) at train time,
    /// identity in eval mode or at p = 0.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArg(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xa = self.value(x);
        let mask: Vec<f64> = (0..xa.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let data = xa.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xa.shape().to_vec();
        self.push(NdArray::new(shape, data)?, Op::Dropout { x, mask })
    }

    // ── Reductions and reshuffles ───────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(NdArray::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(NdArray::scalar(s / n), Op::MeanAll(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (data, shape) = self.reduce_axis(x, axis, false)?;
        self.push(NdArray::new(shape, data)?, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (data, shape) = self.reduce_axis(x, axis, true)?;
        self.push(NdArray::new(shape, data)?, Op::MeanAxis { x, axis })
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<(Vec<f64>, Vec<usize>)> {
        let xa = self.value(x);
        if axis >= xa.rank() {
            return Err(Error::shape("reduce_axis", format!("axis {axis} for rank {}", xa.rank())));
        }
        let (outer, alen, inner) = axis_split(xa.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let data = xa.data();
        for o in 0..outer {
            for a in 0..alen {
                let base = o * alen * inner + a * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += data[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= alen as f64;
            }
        }
        let mut shape: Vec<usize> = xa.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((out, shape))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xa = self.value(x);
        let (rows, cols) = (xa.rows(), xa.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArg(format!("gather_rows: index {bad} out of {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&xa.data()[i * cols..(i + 1) * cols]);
        }
        self.push(NdArray::new(vec![idx.len(), cols], data)?, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat_rows: empty input".into()));
        }
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let a = self.value(v);
            if a.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {} cols", a.cols(), cols)));
            }
            rows += a.rows();
            data.extend_from_slice(a.data());
        }
        self.push(NdArray::new(vec![rows, cols], data)?, Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat_cols: empty input".into()));
        }
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
        for &v in xs {
            if self.value(v).rows() != rows {
                return Err(Error::shape("concat_cols", format!("{} vs {} rows", self.value(v).rows(), rows)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data().to_vec();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(NdArray::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean of -ln p[target] over rows of a probability matrix. Probabilities
    /// below PROB_CLAMP are floored (and contribute zero gradient).
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let pa = self.value(probs);
        let (rows, cols) = (pa.rows(), pa.cols());
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets vs {} rows", targets.len(), rows)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArg(format!("cross_entropy: class {bad} out of {cols}")));
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= pa.at(r, t).max(PROB_CLAMP).ln();
        }
        loss /= rows as f64;
        self.push(NdArray::scalar(loss), Op::CrossEntropy { probs, targets: targets.to_vec() })
    }

    /// Mean binary cross-entropy of per-element probabilities against 0/1 targets.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let pa = self.value(probs);
        if targets.len() != pa.len() {
            return Err(Error::shape("bce", format!("{} targets vs {} probs", targets.len(), pa.len())));
        }
        let mut loss = 0.0;
        for (&p, &y) in pa.data().iter().zip(targets) {
            loss -= y * p.max(PROB_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(PROB_CLAMP).ln();
        }
        loss /= targets.len() as f64;
        self.push(NdArray::scalar(loss), Op::Bce { probs, targets: targets.to_vec() })
    }

    // ── Backward ────────────────────────────────────────────────────

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.values[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let buf = self.grad_buf(v);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Populate gradients for everything reachable from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grad_buf(loss)[0] += 1.0;

        for i in (0..self.ops.len()).rev() {
            let grad = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = Var(i);
            // Ops are moved out one at a time to satisfy the borrow checker;
            // each arm restores nothing because ops are immutable records.
            match &self.ops[i] {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                &Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                &Op::MulElem(a, b) => {
                    let da: Vec<f64> = grad.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = grad.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::DivElem(a, b) => {
                    let bv = self.value(b).data();
                    let av = self.value(a).data();
                    let da: Vec<f64> = grad.iter().zip(bv).map(|(g, y)| g / y).collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::AddRow(x, b) => {
                    let cols = self.value(b).len();
                    let mut db = vec![0.0; cols];
                    for row in grad.chunks(cols) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(x, &grad);
                    self.accumulate(b, &db);
                }
                Op::RowScale(x, w) => {
                    let (x, w) = (*x, w.clone());
                    let cols = self.value(x).cols();
                    let mut dx = grad.clone();
                    for (i, row) in dx.chunks_mut(cols).enumerate() {
                        for v in row.iter_mut() {
                            *v *= w[i];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                &Op::Scale(x, c) => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                &Op::AddScalar(x, _) => {
                    self.accumulate(x, &grad);
                }
                &Op::Matmul(a, b) => {
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    let da = mm_nt(&grad, self.value(b).data(), m, n, k);
                    let db = mm_tn(self.value(a).data(), &grad, k, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::MatmulTn(a, b) => {
                    // out = AᵀB, A[k,m], B[k,n], grad [m,n]
                    let (k, m) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    let da = mm_nt(self.value(b).data(), &grad, k, n, m);
                    let db = mm_nn(self.value(a).data(), &grad, k, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::MatmulNt(a, b) => {
                    // out = ABᵀ, A[m,k], B[n,k], grad [m,n]
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).rows();
                    let da = mm_nn(&grad, self.value(b).data(), m, n, k);
                    let db = mm_tn(&grad, self.value(a).data(), n, m, k);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::Relu(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                &Op::Sigmoid(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(node).data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
                &Op::Softplus(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(g, &v)| g / (1.0 + (-v).exp()))
                        .collect();
                    self.accumulate(x, &dx);
                }
                &Op::Exp(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(node).data())
                        .map(|(g, &e)| g * e)
                        .collect();
                    self.accumulate(x, &dx);
                }
                &Op::Ln(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(g, &v)| g / v)
                        .collect();
                    self.accumulate(x, &dx);
                }
                &Op::Softmax { x, axis } => {
                    let s = self.value(node).data().to_vec();
                    let (outer, alen, inner) = axis_split(self.value(node).shape(), axis);
                    let mut dx = vec![0.0; s.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut dot = 0.0;
                            for a in 0..alen {
                                let f = base + a * inner;
                                dot += grad[f] * s[f];
                            }
                            for a in 0..alen {
                                let f = base + a * inner;
                                dx[f] = s[f] * (grad[f] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::MaskedSoftmaxRows { x, .. } => {
                    let x = *x;
                    let s = self.value(node).data().to_vec();
                    let cols = self.value(node).cols();
                    let mut dx = vec![0.0; s.len()];
                    for r in 0..self.value(node).rows() {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| grad[base + c] * s[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = s[base + c] * (grad[base + c] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                &Op::LayerNormRows { x, gain, bias, eps } => {
                    let d = self.value(x).cols();
                    let xv = self.value(x).data().to_vec();
                    let gv = self.value(gain).data().to_vec();
                    let rows = self.value(x).rows();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let g = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = g.iter().zip(&gv).map(|(gi, gn)| gi * gn).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dgain[j] += g[j] * xhat[j];
                            dbias[j] += g[j];
                            dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::Dropout { x, mask } => {
                    let (x, mask) = (*x, mask.clone());
                    let dx: Vec<f64> = grad.iter().zip(&mask).map(|(g, m)| g * m).collect();
                    self.accumulate(x, &dx);
                }
                &Op::SumAll(x) => {
                    let dx = vec![grad[0]; self.value(x).len()];
                    self.accumulate(x, &dx);
                }
                &Op::MeanAll(x) => {
                    let n = self.value(x).len() as f64;
                    let dx = vec![grad[0] / n; self.value(x).len()];
                    self.accumulate(x, &dx);
                }
                &Op::SumAxis { x, axis } | &Op::MeanAxis { x, axis } => {
                    let is_mean = matches!(self.ops[i], Op::MeanAxis { .. });
                    let (outer, alen, inner) = axis_split(self.value(x).shape(), axis);
                    let scale = if is_mean { 1.0 / alen as f64 } else { 1.0 };
                    let mut dx = vec![0.0; self.value(x).len()];
                    for o in 0..outer {
                        for a in 0..alen {
                            let base = o * alen * inner + a * inner;
                            let gbase = o * inner;
                            for k in 0..inner {
                                dx[base + k] = grad[gbase + k] * scale;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::GatherRows { x, idx } => {
                    let (x, idx) = (*x, idx.clone());
                    let cols = self.value(x).cols();
                    let mut dx = vec![0.0; self.value(x).len()];
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[src_r * cols + c] += grad[out_r * cols + c];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatRows(xs) => {
                    let xs = xs.clone();
                    let cols = self.value(node).cols();
                    let mut start = 0;
                    for v in xs {
                        let r = self.value(v).rows();
                        let slice = grad[start * cols..(start + r) * cols].to_vec();
                        self.accumulate(v, &slice);
                        start += r;
                    }
                }
                Op::ConcatCols(xs) => {
                    let xs = xs.clone();
                    let rows = self.value(node).rows();
                    let total = self.value(node).cols();
                    let mut off = 0;
                    for v in xs {
                        let w = self.value(v).cols();
                        let mut dv = vec![0.0; rows * w];
                        for r in 0..rows {
                            dv[r * w..(r + 1) * w].copy_from_slice(&grad[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(v, &dv);
                        off += w;
                    }
                }
                Op::CrossEntropy { probs, targets } => {
                    let (probs, targets) = (*probs, targets.clone());
                    let pa = self.value(probs);
                    let cols = pa.cols();
                    let n = targets.len() as f64;
                    let mut dp = vec![0.0; pa.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pa.at(r, t);
                        if p > PROB_CLAMP {
                            dp[r * cols + t] = -grad[0] / (n * p);
                        }
                    }
                    self.accumulate(probs, &dp);
                }
                Op::Bce { probs, targets } => {
                    let (probs, targets) = (*probs, targets.clone());
                    let pa = self.value(probs).data().to_vec();
                    let n = targets.len() as f64;
                    let mut dp = vec![0.0; pa.len()];
                    for (k, (&p, &y)) in pa.iter().zip(&targets).enumerate() {
                        let mut g = 0.0;
                        if p > PROB_CLAMP {
                            g -= y / p;
                        }
                        if 1.0 - p > PROB_CLAMP {
                            g += (1.0 - y) / (1.0 - p);
                        }
                        dp[k] = grad[0] * g / n;
                    }
                    self.accumulate(probs, &dp);
                }
            }
        }

        for (id, v) in self.bound.clone() {
            if let Some(g) = &self.grads[v.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "backward(param grad)" });
                }
            }
            let _ = id;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::MulElem(..) => "mul",
        Op::DivElem(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::RowScale(..) => "row_scale",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Matmul(..) => "matmul",
        Op::MatmulTn(..) => "matmul_tn",
        Op::MatmulNt(..) => "matmul_nt",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Softmax { .. } => "softmax",
        Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Bce { .. } => "bce",
    }
}
