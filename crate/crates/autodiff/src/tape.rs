//! Gradient tape: records operations in execution order and replays their
//! adjoint rules in reverse.

use std::borrow::Cow;

use crate::error::TensorError;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded record of tensor operations.
///
/// Parameters may be borrowed (`param`) so that building a forward pass does
/// not copy weights; the borrow ends when the tape is dropped.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A borrowed trainable leaf.
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(tensor), Op::Leaf, true)
    }

    /// An owned trainable leaf.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("shapes already checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x n` bias row to every row of an `m x n` tensor. This is the
    /// only broadcasting the tape supports.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(TensorError::mismatch("add_row", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        let cols = ta.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += tb.data()[i % cols];
        }
        Ok(self.derived(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.derived(out, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.derived(out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.derived(out, Op::Exp(a), &[a])
    }

    /// Side-by-side concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_cols", "no parts"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(TensorError::mismatch(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacked concatenation; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_rows", "no parts"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(TensorError::mismatch(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("range {start}..{end} invalid for {} columns", t.cols()),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor::new(t.rows(), end - start, data)?;
        Ok(self.derived(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("range {start}..{end} invalid for {} rows", t.rows()),
            ));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(end - start, cols, data)?;
        Ok(self.derived(out, Op::SliceRows(a, start), &[a]))
    }

    /// Row lookup (`out[i] = table[indices[i]]`), the embedding primitive.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", t.rows()),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(indices.len(), t.cols(), data)?;
        Ok(self.derived(out, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::SumAll(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let n = targets.len().max(1) as f64;
        let weights = vec![1.0 / n; targets.len()];
        self.weighted_softmax_cross_entropy(logits, targets, &weights)
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`.
    ///
    /// A zero weight masks a row out entirely. Max-subtraction keeps the
    /// log-sum-exp finite for large logits.
    pub fn weighted_softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (rows, classes) = t.shape();
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!(
                    "{rows} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let mut probs = Tensor::zeros(rows, classes);
        let mut loss = 0.0;
        for r in 0..rows {
            let target = targets[r];
            if target >= classes {
                return Err(TensorError::TargetOutOfRange {
                    row: r,
                    index: target,
                    classes,
                });
            }
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs.set(r, c, e);
                denom += e;
            }
            for c in 0..classes {
                probs.set(r, c, probs.get(r, c) / denom);
            }
            if weights[r] != 0.0 {
                let log_prob = row[target] - max - denom.ln();
                loss -= weights[r] * log_prob;
            }
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse pass from a `1 x 1` root. Gradients of every leaf that
    /// requires one are returned; contributions through shared nodes add up.
    /// Interior gradients are dropped once propagated.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be a scalar, got {}x{}", shape.0, shape.1),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let acc = slot(grads, *a, ta.shape());
                    gemm(1.0, g, false, tb, true, 1.0, acc);
                }
                if self.requires_grad(*b) {
                    let acc = slot(grads, *b, tb.shape());
                    gemm(1.0, ta, true, g, false, 1.0, acc);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| acc.add_scaled(1.0, g));
                self.accumulate(grads, *b, |acc| acc.add_scaled(1.0, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| acc.add_scaled(1.0, g));
                self.accumulate(grads, *b, |acc| acc.add_scaled(-1.0, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |acc| add_product(acc, g, tb));
                self.accumulate(grads, *b, |acc| add_product(acc, g, ta));
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |acc| acc.add_scaled(1.0, g));
                self.accumulate(grads, *bias, |acc| {
                    let cols = g.cols();
                    for (i, x) in g.data().iter().enumerate() {
                        acc.data_mut()[i % cols] += x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |acc| acc.add_scaled(*factor, g));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, |acc| acc.add_scaled(1.0, g));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |acc| {
                for ((d, &gy), &y) in acc.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gy * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |acc| {
                for ((d, &gy), &y) in acc.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gy * (1.0 - y * y);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |acc| add_product(acc, g, out)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    self.accumulate(grads, *p, |acc| {
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[offset..offset + width];
                            let dst = &mut acc.data_mut()[r * width..(r + 1) * width];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |acc| {
                        for (d, s) in acc
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + len])
                        {
                            *d += s;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let width = g.cols();
                self.accumulate(grads, *a, |acc| {
                    for r in 0..g.rows() {
                        let dst = &mut acc.data_mut()[r * cols + start..r * cols + start + width];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let offset = start * g.cols();
                self.accumulate(grads, *a, |acc| {
                    let dst = &mut acc.data_mut()[offset..offset + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let cols = g.cols();
                self.accumulate(grads, *table, |acc| {
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut acc.data_mut()[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gy = g.item();
                self.accumulate(grads, *a, |acc| {
                    for d in acc.data_mut() {
                        *d += gy;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let gy = g.item();
                self.accumulate(grads, *logits, |acc| {
                    let classes = probs.cols();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut acc.data_mut()[r * classes..(r + 1) * classes];
                        for (c, d) in row.iter_mut().enumerate() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *d += gy * w * (probs.get(r, c) - onehot);
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if self.requires_grad(v) {
            f(slot(grads, v, self.value(v).shape()));
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn add_product(acc: &mut Tensor, a: &Tensor, b: &Tensor) {
    for ((d, &x), &y) in acc.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *d += x * y;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root (or needs no gradient).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
