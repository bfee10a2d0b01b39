//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes once in reverse insertion order, which is a valid reverse
//! topological order because inputs always precede their consumers.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    SegmentSum(Var, Rc<[usize]>),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Rc<[usize]>),
    BlendRows(Var, Var, Rc<[bool]>),
    RowNorms(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, probs: Tensor, targets: Vec<usize> },
    BceWithLogits { logits: Var, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_count: usize,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax of one row restricted to `mask` (masked-out entries get exactly 0).
pub(crate) fn softmax_slice(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if keep(j) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.dims()?;
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.dims()?;
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the same
    /// variable so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.param_count = self.param_count.max(store.len());
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims()?;
        if tr.dims()? != (1, n) {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `a[m,n] * row[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims()?;
        if tr.dims()? != (1, n) {
            return Err(mismatch("mul_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d *= r;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// `a[m,n] * col[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = ta.dims()?;
        if tc.dims()? != (m, 1) {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let w = tc.data()[i];
            data[i * n..(i + 1) * n].iter_mut().for_each(|d| *d *= w);
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax where `col_mask[j] == false` removes column `j` from
    /// every row (equivalent to a −∞ logit).
    pub fn softmax_masked(&mut self, a: Var, col_mask: Option<Rc<[bool]>>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims()?;
        if let Some(mask) = &col_mask {
            if mask.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "softmax_masked",
                    left: ta.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_slice(
                &ta.data()[i * n..(i + 1) * n],
                col_mask.as_deref(),
                &mut data[i * n..(i + 1) * n],
            );
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Softmax of a `[E,1]` column independently within each segment.
    /// `segments[e]` names the group of row `e`.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>, groups: usize) -> Result<Var> {
        let ta = self.value(a);
        let (e, c) = ta.dims()?;
        if c != 1 || segments.len() != e {
            return Err(Error::ShapeMismatch {
                op: "segment_softmax",
                left: ta.shape().to_vec(),
                right: vec![segments.len(), 1],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= groups) {
            return Err(Error::invalid(
                "segment_softmax",
                format!("segment {bad} out of range {groups}"),
            ));
        }
        let x = ta.data();
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (i, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(x[i]);
        }
        let mut out: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(i, &s)| (x[i] - max[s]).exp())
            .collect();
        let mut total = vec![0.0; groups];
        for (i, &s) in segments.iter().enumerate() {
            total[s] += out[i];
        }
        for (i, &s) in segments.iter().enumerate() {
            out[i] /= total[s];
        }
        let out = Tensor::column(out);
        let ng = self.ng(a);
        self.push(out, Op::SegmentSoftmax(a, segments, groups), ng)
    }

    /// Sums rows of `a[E,d]` into `groups` rows according to `segments`.
    pub fn segment_sum(&mut self, a: Var, segments: Rc<[usize]>, groups: usize) -> Result<Var> {
        let ta = self.value(a);
        let (e, d) = ta.dims()?;
        if segments.len() != e {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                left: ta.shape().to_vec(),
                right: vec![segments.len()],
            });
        }
        let mut out = vec![0.0; groups * d];
        for (i, &s) in segments.iter().enumerate() {
            if s >= groups {
                return Err(Error::invalid(
                    "segment_sum",
                    format!("segment {s} out of range {groups}"),
                ));
            }
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(ta.row_slice(i)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(groups, d, out)?;
        let ng = self.ng(a);
        self.push(out, Op::SegmentSum(a, segments), ng)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims()?;
        let mut data = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = ta.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.dims()?.0 != m {
                return Err(mismatch("concat_cols", self.value(first), t));
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims()?.1 != n {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims()?;
        if start > end || end > n {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} out of bounds for {n} columns"),
            ));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&ta.row_slice(i)[start..end]);
        }
        let out = Tensor::matrix(m, end - start, data)?;
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims()?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= m {
                return Err(Error::invalid(
                    "select_rows",
                    format!("row {i} out of bounds for {m} rows"),
                ));
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, idx), ng)
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.select_rows(a, Rc::from(vec![i]))
    }

    /// Row `i` from `a` where `take_a[i]`, else from `b`.
    pub fn blend_rows(&mut self, a: Var, b: Var, take_a: Rc<[bool]>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("blend_rows", ta, tb));
        }
        let (m, n) = ta.dims()?;
        if take_a.len() != m {
            return Err(Error::ShapeMismatch {
                op: "blend_rows",
                left: ta.shape().to_vec(),
                right: vec![take_a.len()],
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for (i, &pick) in take_a.iter().enumerate() {
            let src = if pick { ta } else { tb };
            data.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::BlendRows(a, b, take_a), ng)
    }

    /// Euclidean norm of every row, `[m,n] -> [m,1]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, _) = ta.dims()?;
        let data = (0..m)
            .map(|i| ta.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::column(data);
        let ng = self.ng(a);
        self.push(out, Op::RowNorms(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = tl.dims()?;
        if targets.len() != m || m == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} out of range {c}"),
                ));
            }
            let row = tl.row_slice(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_slice(row, None, &mut probs[i * c..(i + 1) * c]);
        }
        let probs = Tensor::matrix(m, c, probs)?;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Mean over all elements of the logistic loss against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() || tl.is_empty() {
            return Err(mismatch("bce_with_logits", tl, &targets));
        }
        let loss = tl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / tl.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
            ng,
        )
    }

    /// `a · Wᵀ`-free linear map: `x[m,in] · w[in,out] + b[1,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a `[1,1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params = vec![None; self.param_count];
        for (&pid, &var) in &self.params {
            params[pid.0] = grads[var.0].clone();
        }
        Ok(Gradients {
            by_node: grads,
            params: ParamGrads::from_vec(params),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(gd, tb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::matrix(m, k, da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(ta.data(), gd, &mut db, m, k, n);
                    acc(*b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da)?);
                acc(*b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let (m, n) = g.dims()?;
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for (d, v) in dr.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                        *d += v;
                    }
                }
                acc(*row, Tensor::row(dr));
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let (m, n) = g.dims()?;
                let mut da = vec![0.0; m * n];
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gd[i * n + j] * tr.data()[j];
                        dr[j] += gd[i * n + j] * ta.data()[i * n + j];
                    }
                }
                acc(*a, Tensor::matrix(m, n, da)?);
                acc(*row, Tensor::row(dr));
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let (m, n) = g.dims()?;
                let mut da = vec![0.0; m * n];
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gd[i * n + j] * tc.data()[i];
                        dc[i] += gd[i * n + j] * ta.data()[i * n + j];
                    }
                }
                acc(*a, Tensor::matrix(m, n, da)?);
                acc(*col, Tensor::column(dc));
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::Tanh(a) => {
                let y = &node.value;
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let d = gd.iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = y.dims()?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::matrix(m, n, d)?);
            }
            Op::SegmentSoftmax(a, seg, groups) => {
                let y = node.value.data();
                let mut dot = vec![0.0; *groups];
                for (i, &s) in seg.iter().enumerate() {
                    dot[s] += y[i] * gd[i];
                }
                let d = seg
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| y[i] * (gd[i] - dot[s]))
                    .collect();
                acc(*a, Tensor::column(d));
            }
            Op::SegmentSum(a, seg) => {
                let d = g.cols();
                let mut out = Vec::with_capacity(seg.len() * d);
                for &s in seg.iter() {
                    out.extend_from_slice(&gd[s * d..(s + 1) * d]);
                }
                acc(*a, Tensor::matrix(seg.len(), d, out)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let (m, n) = y.dims()?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = &gd[i * n..(i + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[i * n + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(*x, Tensor::matrix(m, n, d)?);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims()?;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n + offset..i * n + offset + w]);
                    }
                    acc(p, Tensor::matrix(m, w, d)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    let d = gd[offset * n..(offset + r) * n].to_vec();
                    acc(p, Tensor::matrix(r, n, d)?);
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = val(*a).dims()?;
                let w = g.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*a, Tensor::matrix(m, n, d)?);
            }
            Op::SelectRows(a, idx) => {
                let (m, n) = val(*a).dims()?;
                let mut d = vec![0.0; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[k * n..(k + 1) * n]) {
                        *o += v;
                    }
                }
                acc(*a, Tensor::matrix(m, n, d)?);
            }
            Op::BlendRows(a, b, take_a) => {
                let (m, n) = g.dims()?;
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; m * n];
                for (i, &pick) in take_a.iter().enumerate() {
                    let dst = if pick { &mut da } else { &mut db };
                    dst[i * n..(i + 1) * n].copy_from_slice(&gd[i * n..(i + 1) * n]);
                }
                acc(*a, Tensor::matrix(m, n, da)?);
                acc(*b, Tensor::matrix(m, n, db)?);
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let (m, n) = x.dims()?;
                let norms = node.value.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] > 0.0 {
                        let k = gd[i] / norms[i];
                        for j in 0..n {
                            d[i * n + j] = k * x.data()[i * n + j];
                        }
                    }
                }
                acc(*a, Tensor::matrix(m, n, d)?);
            }
            Op::Sum(a) => {
                let t = val(*a);
                acc(*a, Tensor::new(t.shape().to_vec(), vec![gd[0]; t.len()])?);
            }
            Op::Mean(a) => {
                let t = val(*a);
                let k = gd[0] / t.len() as f64;
                acc(*a, Tensor::new(t.shape().to_vec(), vec![k; t.len()])?);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let (m, c) = probs.dims()?;
                let k = gd[0] / m as f64;
                let mut d = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= k);
                acc(*logits, Tensor::matrix(m, c, d)?);
            }
            Op::BceWithLogits { logits, targets } => {
                let x = val(*logits);
                let k = gd[0] / x.len() as f64;
                let d = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| k * (sigmoid(x) - y))
                    .collect();
                acc(*logits, Tensor::new(x.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::MulCol(..) => "mul_col",
        Op::Scale(..) => "scale",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
        Op::Relu(..) => "relu",
        Op::Softmax(..) => "softmax",
        Op::SegmentSoftmax(..) => "segment_softmax",
        Op::SegmentSum(..) => "segment_sum",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::SelectRows(..) => "select_rows",
        Op::BlendRows(..) => "blend_rows",
        Op::RowNorms(..) => "row_norms",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::row(v.to_vec())).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[1000.0, 999.0, -1000.0]);
        let y = tape.softmax(x).unwrap();
        let sum: f64 = tape.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[3.0, 1.0, 2.0]);
        let y = tape
            .softmax_masked(x, Some(Rc::from(vec![true, false, true])))
            .unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.0; 4]);
        let y = tape.tanh(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_length_adds() {
        let mut tape = Tape::new();
        let a = row(&mut tape, &[1.0, 2.0]);
        let b = row(&mut tape, &[3.0, 4.0, 5.0]);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = row(&mut tape, &[1.0, 2.0]);
        let b = row(&mut tape, &[1.0, 2.0, 3.0]);
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![1, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::scalar(3.0).with_requires_grad(true))
            .unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0)).unwrap();
        let x = tape
            .leaf(Tensor::scalar(1.5).with_requires_grad(true))
            .unwrap();
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.7; 5]);
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id).unwrap();
        let b = tape.param(&store, id).unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params().get(id).unwrap().item(), 4.0);
    }
}
