//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends one node whose operands are strictly earlier
//! nodes, so a single reverse sweep over the node list visits each node once.
//! The tape is meant to be built, differentiated and dropped.

use super::tensor::{
    dot, log_softmax_rows, matmul_into, matmul_nt_into, matmul_tn_into, Tensor,
};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `log(1 - alpha)` is evaluated inside the eviction mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// `alpha` clamped to `1 - 1e-12` so gradients stay finite.
    Relaxed,
    /// `alpha == 1` yields exactly `-inf`.
    Exact,
}

/// Largest decision value admitted in relaxed mode.
pub const ALPHA_CLAMP: f64 = 1.0 - 1e-12;

/// Parameters of the fused causal + eviction mask node.
#[derive(Clone, Debug)]
pub struct EvictionMaskSpec {
    /// Decisions tensor `T×H`; `None` gives a plain causal mask.
    pub decisions: Option<(Var, usize)>,
    /// Grace window `w >= 1`: key `j` is unaffected for queries `i < j + w`.
    pub window: usize,
    /// Offset of the decision governing key `j` (0 for delayed eviction,
    /// `w` when the decision is taken at eviction time).
    pub source_offset: usize,
    pub mode: MaskMode,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddConst(Var),
    ScaleCols(Var, Vec<f64>),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    RmsNormRows(Var, f64),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    EvictionMask(Var, EvictionMaskSpec),
    KlDiv { student: Var, teacher: Tensor, floor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient with respect to `v`, zeros when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mask value added to the score of key `j` at query `i`, excluding the
/// causal part. `alpha` is the decision governing key `j`, if any.
pub(crate) fn eviction_offset(alpha: Option<f64>, mode: MaskMode) -> f64 {
    match alpha {
        None => 0.0,
        Some(a) => {
            let a = a.max(0.0);
            match mode {
                MaskMode::Relaxed => (1.0 - a.min(ALPHA_CLAMP)).ln(),
                MaskMode::Exact => {
                    if a >= 1.0 {
                        f64::NEG_INFINITY
                    } else {
                        (1.0 - a).ln()
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.numel() != n {
            return Err(mismatch(name, ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x = f(*x, r);
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, op))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("add_row", a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("mul_row", a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Adds a constant (non-differentiated) tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("add_const", ta, c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::AddConst(a)))
    }

    /// Multiplies column `j` by the constant `factors[j]`.
    pub fn scale_cols(&mut self, a: Var, factors: Vec<f64>) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let n = ta.cols();
        if factors.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_cols",
                left: ta.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, f) in chunk.iter_mut().zip(&factors) {
                *x *= f;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::ScaleCols(a, factors)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// `x / sqrt(mean(x²) + eps)` per row, without a gain.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            let ms = chunk.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for x in chunk.iter_mut() {
                *x *= inv;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::RmsNormRows(a, eps))
    }

    /// Row lookup: `out[r] = table[indices[r]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        let (v, n) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: v });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), n], data).expect("gather shape");
        Ok(self.push(out, Op::Gather(table, indices.to_vec())))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let n = t.cols();
        if start + len > t.rows() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: t.rows(),
            });
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data).expect("slice shape");
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange { index: start + len, len: n });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data).expect("slice shape");
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data).expect("concat shape");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Adds the causal mask and the eviction mask to a square score matrix.
    ///
    /// Query `i` sees key `j` iff `j <= i`; for `i >= j + w` the score is
    /// additionally offset by `log(1 - alpha)` of the decision governing `j`.
    pub fn eviction_mask(&mut self, scores: Var, spec: EvictionMaskSpec) -> Result<Var, NumericsError> {
        let s = self.value(scores);
        let t = s.rows();
        if s.cols() != t {
            return Err(NumericsError::NotSquare { shape: s.shape().to_vec() });
        }
        if spec.window == 0 {
            return Err(NumericsError::Invalid("eviction window must be >= 1".into()));
        }
        let alphas = match spec.decisions {
            Some((a, col)) => {
                let ta = self.value(a);
                if ta.rows() != t || col >= ta.cols() {
                    return Err(mismatch("eviction_mask", s, ta));
                }
                Some((0..t).map(|r| ta.get(r, col)).collect::<Vec<_>>())
            }
            None => None,
        };
        let offsets: Vec<f64> = (0..t)
            .map(|j| {
                let src = j + spec.source_offset;
                let alpha = alphas.as_ref().and_then(|a| a.get(src).copied());
                eviction_offset(alpha, spec.mode)
            })
            .collect();
        let mut data = s.data().to_vec();
        for i in 0..t {
            let row = &mut data[i * t..(i + 1) * t];
            for (j, x) in row.iter_mut().enumerate() {
                if j > i {
                    *x = f64::NEG_INFINITY;
                } else if i >= j + spec.window {
                    *x += offsets[j];
                }
            }
        }
        let out = Tensor::new(vec![t, t], data).expect("mask shape");
        Ok(self.push(out, Op::EvictionMask(scores, spec)))
    }

    /// Mean over rows of `KL(teacher || softmax(student))`, with student
    /// log-probabilities floored at `floor`. `teacher` holds probabilities.
    pub fn kl_div(&mut self, student: Var, teacher: &Tensor, floor: f64) -> Result<Var, NumericsError> {
        let s = self.value(student);
        if s.shape() != teacher.shape() {
            return Err(mismatch("kl_div", s, teacher));
        }
        let value = kl_rows(s, teacher, floor)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDiv {
                student,
                teacher: teacher.clone(),
                floor,
            },
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(NumericsError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                matmul_nt_into(g, tb.data(), slot!(*a), m, n, k);
                matmul_tn_into(ta.data(), g, slot!(*b), m, k, n);
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A.
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                matmul_into(g, tb.data(), slot!(*a), m, n, k);
                matmul_tn_into(g, ta.data(), slot!(*b), m, n, k);
            }
            Op::Add(a, b) => {
                add_into(slot!(*a), g);
                add_into(slot!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(slot!(*a), g);
                for (d, x) in slot!(*b).iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                for ((d, x), y) in slot!(*a).iter_mut().zip(g).zip(tb.data()) {
                    *d += x * y;
                }
                for ((d, x), y) in slot!(*b).iter_mut().zip(g).zip(ta.data()) {
                    *d += x * y;
                }
            }
            Op::AddRow(a, r) => {
                add_into(slot!(*a), g);
                let n = out.cols();
                let dr = slot!(*r);
                for chunk in g.chunks(n) {
                    add_into(dr, chunk);
                }
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let n = out.cols();
                let da = slot!(*a);
                for (i, chunk) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        da[i * n + j] += chunk[j] * tr.data()[j];
                    }
                }
                let dr = slot!(*r);
                for (i, chunk) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        dr[j] += chunk[j] * ta.data()[i * n + j];
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, x) in slot!(*a).iter_mut().zip(g) {
                    *d += x * c;
                }
            }
            Op::AddScalar(a) | Op::AddConst(a) => add_into(slot!(*a), g),
            Op::ScaleCols(a, f) => {
                let n = f.len();
                for (i, d) in slot!(*a).iter_mut().enumerate() {
                    *d += g[i] * f[i % n];
                }
            }
            Op::Sigmoid(a) => {
                for ((d, x), y) in slot!(*a).iter_mut().zip(g).zip(out.data()) {
                    *d += x * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                for ((d, x), v) in slot!(*a).iter_mut().zip(g).zip(ta.data()) {
                    if *v > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                for ((d, x), v) in slot!(*a).iter_mut().zip(g).zip(ta.data()) {
                    *d += x * gelu_grad(*v);
                }
            }
            Op::Sum(a) => {
                for d in slot!(*a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let da = slot!(*a);
                let s = g[0] / da.len() as f64;
                for d in da.iter_mut() {
                    *d += s;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let da = slot!(*a);
                for (i, (gy, y)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let inner = dot(gy, y);
                    for j in 0..n {
                        da[i * n + j] += y[j] * (gy[j] - inner);
                    }
                }
            }
            Op::RmsNormRows(a, eps) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let da = slot!(*a);
                for (i, (gy, x)) in g.chunks(n).zip(ta.data().chunks(n)).enumerate() {
                    let ms = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gx = dot(gy, x);
                    let k = inv * inv * inv * gx / n as f64;
                    for j in 0..n {
                        da[i * n + j] += gy[j] * inv - x[j] * k;
                    }
                }
            }
            Op::Gather(table, idx_list) => {
                let n = out.cols();
                let dt = slot!(*table);
                for (r, &src) in idx_list.iter().enumerate() {
                    add_into(&mut dt[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::SliceRows(a, start) => {
                let n = out.cols();
                let da = slot!(*a);
                add_into(&mut da[start * n..start * n + g.len()], g);
            }
            Op::SliceCols(a, start) => {
                let total = self.value(*a).cols();
                let len = out.cols();
                let da = slot!(*a);
                for (i, chunk) in g.chunks(len).enumerate() {
                    add_into(&mut da[i * total + start..i * total + start + len], chunk);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let dp = slot!(p);
                    for (i, row) in g.chunks(total).enumerate() {
                        add_into(&mut dp[i * w..(i + 1) * w], &row[offset..offset + w]);
                    }
                    offset += w;
                }
            }
            Op::EvictionMask(scores, spec) => {
                let t = out.rows();
                let ds = slot!(*scores);
                for i in 0..t {
                    for j in 0..=i {
                        ds[i * t + j] += g[i * t + j];
                    }
                }
                if let Some((a, col)) = spec.decisions {
                    let ta = self.value(a);
                    let h = ta.cols();
                    let mut dalpha = vec![0.0; t];
                    for j in 0..t {
                        let src = j + spec.source_offset;
                        if src >= t || j + spec.window >= t {
                            continue;
                        }
                        let alpha = ta.get(src, col).max(0.0);
                        let clamped = match spec.mode {
                            MaskMode::Relaxed => alpha >= ALPHA_CLAMP,
                            MaskMode::Exact => alpha >= 1.0,
                        };
                        if clamped {
                            continue;
                        }
                        let upstream: f64 = (j + spec.window..t).map(|i| g[i * t + j]).sum();
                        dalpha[src] += -upstream / (1.0 - alpha);
                    }
                    let da = slot!(a);
                    for (r, d) in dalpha.iter().enumerate() {
                        da[r * h + col] += d;
                    }
                }
            }
            Op::KlDiv { student, teacher, floor } => {
                let ts = self.value(*student);
                let (m, n) = (ts.rows(), ts.cols());
                let ds = slot!(*student);
                let lsm = log_softmax_rows(ts).expect("finite logits");
                let scale = g[0] / m as f64;
                for i in 0..m {
                    let lrow = lsm.row(i);
                    let prow = teacher.row(i);
                    // dL/dlsm_v = -p_v where not floored.
                    let mut total = 0.0;
                    let mut gl = vec![0.0; n];
                    for v in 0..n {
                        if lrow[v] > *floor {
                            gl[v] = -prow[v];
                            total += gl[v];
                        }
                    }
                    for u in 0..n {
                        let sm = lrow[u].exp();
                        ds[i * n + u] += scale * (gl[u] - sm * total);
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Mean over rows of `KL(p || softmax(s))` with floored student log-probs.
pub(crate) fn kl_rows(student: &Tensor, teacher: &Tensor, floor: f64) -> Result<f64, NumericsError> {
    let lsm = log_softmax_rows(student)?;
    let (m, n) = (student.rows(), student.cols());
    let mut total = 0.0;
    for i in 0..m {
        let (lrow, prow) = (lsm.row(i), teacher.row(i));
        let mut row = 0.0;
        for v in 0..n {
            let p = prow[v];
            if p > 0.0 {
                row += p * (p.ln() - lrow[v].max(floor));
            }
        }
        total += row;
    }
    Ok(total / m as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, "tape-test");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
    }

    /// Central-difference check of `f` with respect to each input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut tp = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|t| tp.leaf(t.clone())).collect();
            let r = f(&mut tp, &vs);
            tp.value(r).item()
        };
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[k]);
            for idx in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-6, "input {k}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarRoot { .. })));
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transposed() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        let expected = matmul_nt_ref(&Tensor::ones(&[3, 2]), &b);
        assert!(g.wrt(va).max_abs_diff(&expected) < 1e-15);
        check(vec![a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            t.sum(c)
        });
    }

    fn matmul_nt_ref(a: &Tensor, b: &Tensor) -> Tensor {
        crate::numerics::matmul_nt(a, b).unwrap()
    }

    #[test]
    fn elementwise_and_row_ops() {
        let a = random(&[3, 4], 3);
        let b = random(&[3, 4], 4);
        let r = random(&[4], 5);
        check(vec![a, b, r], |t, v| {
            let x = t.mul(v[0], v[1]).unwrap();
            let x = t.sub(x, v[1]).unwrap();
            let x = t.add_row(x, v[2]).unwrap();
            let x = t.mul_row(x, v[2]).unwrap();
            let x = t.gelu(x);
            let x = t.sigmoid(x);
            let x = t.scale(x, 1.7);
            let x = t.add_scalar(x, -0.3);
            let x = t.scale_cols(x, vec![1.0, 0.5, 0.0, 2.0]).unwrap();
            t.mean(x)
        });
    }

    #[test]
    fn relu_away_from_kink() {
        let a = Tensor::vector(vec![-1.5, -0.2, 0.4, 2.0]);
        check(vec![a], |t, v| {
            let x = t.relu(v[0]);
            let y = t.mul(x, x).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn norm_softmax_and_structure() {
        let a = random(&[4, 6], 6);
        let table = random(&[5, 3], 7);
        let w = random(&[4, 6], 8);
        check(vec![a, table, w], |t, v| {
            let n = t.rms_norm_rows(v[0], 1e-6);
            let s = t.softmax_rows(n).unwrap();
            let s = t.mul(s, v[2]).unwrap();
            let left = t.slice_cols(s, 0, 3).unwrap();
            let right = t.slice_cols(s, 3, 3).unwrap();
            let g = t.gather_rows(v[1], &[4, 0, 4, 2]).unwrap();
            let cat = t.concat_cols(&[right, g, left]).unwrap();
            let rows = t.slice_rows(cat, 1, 3).unwrap();
            let sq = t.mul(rows, rows).unwrap();
            t.sum(sq)
        });
    }

    #[test]
    fn eviction_mask_gradient_reaches_decisions() {
        let t_len = 6;
        let scores = random(&[t_len, t_len], 9);
        let logits = random(&[t_len, 2], 10);
        for offset in [0, 2] {
            check(vec![scores.clone(), logits.clone()], move |t, v| {
                let alpha = t.sigmoid(v[1]);
                let m = t
                    .eviction_mask(
                        v[0],
                        EvictionMaskSpec {
                            decisions: Some((alpha, 1)),
                            window: 2,
                            source_offset: offset,
                            mode: MaskMode::Relaxed,
                        },
                    )
                    .unwrap();
                let p = t.softmax_rows(m).unwrap();
                let w = t.leaf(random(&[t_len, t_len], 11));
                let y = t.mul(p, w).unwrap();
                t.sum(y)
            });
        }
    }

    #[test]
    fn kl_gradient() {
        let student = random(&[3, 5], 12);
        let teacher = crate::numerics::softmax_rows(&random(&[3, 5], 13)).unwrap();
        check(vec![student], move |t, v| t.kl_div(v[0], &teacher, -30.0).unwrap());
    }

    #[test]
    fn matmul_nt_and_add_const() {
        let a = random(&[3, 4], 14);
        let b = random(&[5, 4], 15);
        let c = random(&[3, 5], 16);
        check(vec![a, b], move |t, v| {
            let x = t.matmul_nt(v[0], v[1]).unwrap();
            let x = t.add_const(x, &c).unwrap();
            let x = t.mul(x, x).unwrap();
            t.sum(x)
        });
    }
}
