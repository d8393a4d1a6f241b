use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_in_place, Tensor, Var};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Elementwise operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Exp,
    Log,
    Abs,
    Scale(f64),
}

/// Reductions accepted by [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    L2NormSq,
    RowCosine,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax { x: Var, temperature: f64 },
    LogSoftmax { x: Var, temperature: f64 },
    Sum(Var),
    Mean(Var),
    L2NormSq(Var),
    SumRows(Var),
    RowCosine { a: Var, b: Var, eps: f64 },
    RowNormalize { x: Var, eps: f64 },
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    LogSumExpRows { x: Var, mask: Option<Vec<bool>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it; backward walks the list once in reverse.
///
/// A tape lives for one training step and is dropped afterwards.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value: value.attach(var),
            op,
            needs_grad,
        });
        var
    }

    fn push_from(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        self.push(value, op, needs)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.detach(), Op::Leaf, true)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detach(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.index].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.index].value.item()
    }

    /// Accumulated gradient from previous [`backward`](Self::backward) calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.index].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        let out = ta.matmul(tb)?;
        Ok(self.push_from(out, Op::MatMul(a, b), &[a, b]))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.cols() != tb.cols() {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let data = matmul_nt_raw(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.rows());
        let out = Tensor::new(ta.rows(), tb.rows(), data)?;
        Ok(self.push_from(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.transpose();
        Ok(self.push_from(out, Op::Transpose(x), &[x]))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: name,
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        ta.zip_with(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_from(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_from(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_from(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a 1×c row vector to every row of an n×c matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.check(x)?.value.add_row(&self.check(bias)?.value)?;
        Ok(self.push_from(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.value.map(|v| v * c);
        Ok(self.push_from(out, Op::Scale(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.map(|v| v.max(0.0));
        Ok(self.push_from(out, Op::Relu(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.map(f64::tanh);
        Ok(self.push_from(out, Op::Tanh(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.map(f64::exp);
        Ok(self.push_from(out, Op::Exp(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        let out = t.map(f64::ln);
        Ok(self.push_from(out, Op::Log(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.map(f64::abs);
        Ok(self.push_from(out, Op::Abs(x), &[x]))
    }

    /// Dispatches one of the elementwise operations by kind.
    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{op:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::Relu => self.relu(inputs[0]),
            ElementwiseOp::Tanh => self.tanh(inputs[0]),
            ElementwiseOp::Exp => self.exp(inputs[0]),
            ElementwiseOp::Log => self.log(inputs[0]),
            ElementwiseOp::Abs => self.abs(inputs[0]),
            ElementwiseOp::Scale(c) => self.scale(inputs[0], c),
        }
    }

    // ---- softmax family ----------------------------------------------------

    fn check_temperature(temperature: f64) -> Result<()> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(())
    }

    /// Row-wise softmax of `x / temperature`, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let t = &self.check(x)?.value;
        if !t.all_finite() {
            return Err(Error::Numeric { op: "softmax_rows" });
        }
        let out = t.softmax_rows(temperature);
        Ok(self.push_from(out, Op::Softmax { x, temperature }, &[x]))
    }

    /// Row-wise log-softmax of `x / temperature`.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let t = &self.check(x)?.value;
        if !t.all_finite() {
            return Err(Error::Numeric {
                op: "log_softmax_rows",
            });
        }
        let cols = t.cols();
        let mut out = t.map(|v| v / temperature);
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        debug_assert_eq!(out.cols(), cols);
        Ok(self.push_from(out, Op::LogSoftmax { x, temperature }, &[x]))
    }

    /// Mean cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.check(logits)?.value;
        if labels.len() != t.rows() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: t.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= t.cols()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                t.cols()
            )));
        }
        if t.rows() == 0 {
            return Err(Error::contract("cross_entropy over zero rows"));
        }
        if !t.all_finite() {
            return Err(Error::Numeric {
                op: "cross_entropy",
            });
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            total += logsumexp(row.iter().copied()) - row[y];
        }
        let out = Tensor::scalar(total / t.rows() as f64);
        Ok(self.push_from(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Row-wise log-sum-exp, optionally restricted to entries where `mask` is true.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = &self.check(x)?.value;
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::Dimension {
                    op: "logsumexp_rows",
                    left: t.shape(),
                    right: (m.len(), 1),
                });
            }
        }
        let cols = t.cols();
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let vals: Vec<f64> = match mask {
                Some(m) => row
                    .iter()
                    .zip(&m[r * cols..(r + 1) * cols])
                    .filter_map(|(&v, &keep)| keep.then_some(v))
                    .collect(),
                None => row.to_vec(),
            };
            if vals.is_empty() {
                return Err(Error::contract(format!(
                    "logsumexp_rows: row {r} has no included entries"
                )));
            }
            out.push(logsumexp(vals.into_iter()));
        }
        let out = Tensor::new(t.rows(), 1, out)?;
        Ok(self.push_from(
            out,
            Op::LogSumExpRows {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
            &[x],
        ))
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(x)?.value.sum());
        Ok(self.push_from(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push_from(out, Op::Mean(x), &[x]))
    }

    /// Σ x_ij²
    pub fn l2_norm_sq(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let out = Tensor::scalar(t.data().iter().map(|v| v * v).sum());
        Ok(self.push_from(out, Op::L2NormSq(x), &[x]))
    }

    /// Per-row sums as an n×1 column.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let out = Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().sum());
        Ok(self.push_from(out, Op::SumRows(x), &[x]))
    }

    /// Strict per-row cosine similarity; any zero-norm row is an error.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        {
            let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
            for (name, t) in [("left", ta), ("right", tb)] {
                for r in 0..t.rows() {
                    if t.row(r).iter().all(|&v| v == 0.0) {
                        return Err(Error::Degenerate(format!(
                            "row_cosine: {name} row {r} has zero norm"
                        )));
                    }
                }
            }
        }
        self.row_cosine_eps(a, b, 0.0)
    }

    /// Per-row cosine with `eps` added to each norm in the denominator.
    pub fn row_cosine_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "row_cosine",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let out = Tensor::from_fn(ta.rows(), 1, |r, _| {
            let (x, y) = (ta.row(r), tb.row(r));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            dot / ((norm(x) + eps) * (norm(y) + eps))
        });
        Ok(self.push_from(out, Op::RowCosine { a, b, eps }, &[a, b]))
    }

    /// Each row divided by (its norm + eps).
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.check(x)?.value;
        let mut out = t.detach();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = norm(row) + eps;
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push_from(out, Op::RowNormalize { x, eps }, &[x]))
    }

    /// Dispatches a reduction by kind. `RowCosine` requires `y`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, y: Option<Var>) -> Result<Var> {
        match op {
            ReduceOp::Sum => self.sum(x),
            ReduceOp::Mean => self.mean(x),
            ReduceOp::L2NormSq => self.l2_norm_sq(x),
            ReduceOp::RowCosine => {
                let y = y.ok_or_else(|| Error::contract("row_cosine needs a second operand"))?;
                self.row_cosine(x, y)
            }
        }
    }

    // ---- structural ---------------------------------------------------------------

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.check(x)?.value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let out = t.select_rows(indices);
        Ok(self.push_from(
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.check(first)?.value.rows();
        let mut cols = 0;
        for &p in parts {
            let t = &self.check(p)?.value;
            if t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: t.shape(),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.index].value.row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push_from(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = self.check(first)?.value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.check(p)?.value;
            if t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push_from(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if start + len > t.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: t.shape(),
                right: (start, len),
            });
        }
        let out = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        Ok(self.push_from(out, Op::SliceCols { x, start }, &[x]))
    }

    // ---- reverse pass ------------------------------------------------------------------

    fn check_scalar_loss(&self, loss: Var) -> Result<()> {
        let node = self.check(loss)?;
        if node.value.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        Ok(())
    }

    /// Accumulates ∂loss/∂v into the gradient slot of every node that
    /// requires gradient. Repeated calls add up until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_scalar_loss(loss)?;
        let grads = self.sweep(loss, 0);
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.needs_grad, g) {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Returns ∂loss/∂x as a detached tensor without touching the
    /// accumulated gradients. Zero when `x` does not influence `loss`.
    pub fn grad_of_scalar_wrt(&self, x: Var, loss: Var) -> Result<Tensor> {
        self.check(x)?;
        self.check_scalar_loss(loss)?;
        let (rows, cols) = self.shape(x);
        if x.index > loss.index || !self.nodes[x.index].needs_grad {
            return Ok(Tensor::zeros(rows, cols));
        }
        let mut grads = self.sweep(loss, x.index);
        let g = grads[x.index].take().unwrap_or_else(|| vec![0.0; rows * cols]);
        Tensor::new(rows, cols, g)
    }

    fn sweep(&self, loss: Var, stop: usize) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (stop..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.index].value;
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.index].needs_grad {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contribution)
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };
        let wants = |v: Var| self.nodes[v.index].needs_grad;

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    acc(*a, matmul_nt_raw(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_tn_raw(ta.data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if wants(*a) {
                    acc(*a, matmul_raw(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_tn_raw(g, ta.data(), m, n, k));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = out.shape();
                let gt = Tensor::new(r, c, g.to_vec()).expect("grad shape").transpose();
                acc(*x, gt.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let cols = out.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::Exp(x) => acc(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(
                *x,
                g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect(),
            ),
            Op::Abs(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Softmax { x, temperature } => {
                // dp_y/ds_y' = p_y (1{y=y'} - p_y'), chained through s = x / T
                let cols = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((p, gr), d) in out
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[j] = p[j] * (gr[j] - dot) / temperature;
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x, temperature } => {
                let cols = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((ls, gr), d) in out
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d[j] = (gr[j] - ls[j].exp() * gsum) / temperature;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::L2NormSq(x) => acc(*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::SumRows(x) => {
                let t = val(*x);
                let mut dx = Vec::with_capacity(t.len());
                for r in 0..t.rows() {
                    dx.extend(std::iter::repeat_n(g[r], t.cols()));
                }
                acc(*x, dx);
            }
            Op::RowCosine { a, b, eps } => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for r in 0..ta.rows() {
                    let (x, y) = (ta.row(r), tb.row(r));
                    let (nx, ny) = (norm(x), norm(y));
                    let (dx_, dy_) = (nx + eps, ny + eps);
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let base = g[r] / (dx_ * dy_);
                    for j in 0..cols {
                        let ux = if nx > 0.0 { x[j] / nx } else { 0.0 };
                        let uy = if ny > 0.0 { y[j] / ny } else { 0.0 };
                        da[r * cols + j] = base * (y[j] - dot * ux / dx_);
                        db[r * cols + j] = base * (x[j] - dot * uy / dy_);
                    }
                }
                if wants(*a) {
                    acc(*a, da);
                }
                if wants(*b) {
                    acc(*b, db);
                }
            }
            Op::RowNormalize { x, eps } => {
                let t = val(*x);
                let cols = t.cols();
                let mut dx = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    let row = t.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let n = norm(row);
                    let d = n + eps;
                    let xg: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        let u = if n > 0.0 { row[j] / n } else { 0.0 };
                        dx[r * cols + j] = gr[j] / d - xg * u / (d * d);
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, indices } => {
                let t = val(*x);
                let cols = t.cols();
                let mut dx = vec![0.0; t.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        dx[i * cols + j] += g[k * cols + j];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(p, dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let t = val(*x);
                let (cols, len) = (t.cols(), out.cols());
                let mut dx = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = val(*logits);
                let cols = t.cols();
                let scale = g[0] / t.rows() as f64;
                let mut dx = t.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    let row = &mut dx[r * cols..(r + 1) * cols];
                    softmax_in_place(row, 1.0);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, dx);
            }
            Op::LogSumExpRows { x, mask } => {
                let t = val(*x);
                let cols = t.cols();
                let mut dx = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    let lse = out.data()[r];
                    for j in 0..cols {
                        let k = r * cols + j;
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            dx[k] = g[r] * (t.data()[k] - lse).exp();
                        }
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
