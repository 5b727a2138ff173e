//! Dense row-major `f64` tensors with a reverse-mode tape.
//!
//! Every value on a [`Tape`] is a rank-2 matrix; vectors are `[1, d]` rows and
//! scalars are `[1, 1]`. Ops return `Result` so shape and numeric failures
//! surface at the call site instead of as panics deep inside a loss.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Usage(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "row vector must be non-empty");
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(TensorError::Usage("from_rows needs at least one row".into()));
        };
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` view; rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Usage(format!(
                "expected a rank-1 or rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Plain-slice cosine similarity, used outside the tape (metrics, argmax).
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(TensorError::NonFinite { op: "cosine" });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    MeanPool(Var, Axis),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Element(Var, usize, usize),
    NormalizeRows(Var),
    CausalMix { weights: Var, input: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended after their inputs, so the
/// node vector is already a topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` when `var` does not
    /// require gradients or does not influence the root.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0].as_ref().map(|g| Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
        })
    }

    /// Like [`Gradients::get`] but returns zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    if (ar, ac) == (br, bc) {
        Ok(Broadcast::Same)
    } else if br == 1 && bc == 1 {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn b_index(kind: Broadcast, idx: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => idx,
        Broadcast::Row => idx % cols,
        Broadcast::Scalar => 0,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Inputs are reshaped to rank 2.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let (r, c) = t.dims2()?;
        let value = Tensor {
            shape: vec![r, c],
            data: t.data,
        };
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta, tb)?;
        let cols = ta.cols();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data[b_index(kind, i, cols)]))
            .collect();
        Ok((
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            kind,
        ))
    }

    /// Elementwise `a + b`; `b` may be a `[1, c]` row or a `[1, 1]` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.record("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.record("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.record("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * k).collect(),
        };
        self.record("scale", t, Op::Scale(a, k), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.record("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let data = transpose_raw(&ta.data, r, c);
        self.record("transpose", Tensor { shape: vec![c, r], data }, Op::Transpose(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.tanh()).collect(),
        };
        self.record("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.exp()).collect(),
        };
        self.record("exp", t, Op::Exp(a), &[a])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax_slice(&ta.data[i * c..(i + 1) * c]));
        }
        self.record("softmax", Tensor { shape: vec![r, c], data }, Op::Softmax(a), &[a])
    }

    /// Mean cross-entropy over rows of `logits`, one target index per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = tl.dims2()?;
        if targets.len() != r {
            return Err(shape_err("cross_entropy", &[r, c], &[targets.len()]));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::Usage(format!(
                    "cross_entropy target {t} out of range for vocabulary of size {c}"
                )));
            }
            let row = &tl.data[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / r as f64);
        self.record(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn mean_pool(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let t = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, x) in acc.iter_mut().zip(&ta.data[i * c..(i + 1) * c]) {
                        *s += x;
                    }
                }
                acc.iter_mut().for_each(|s| *s /= r as f64);
                Tensor { shape: vec![1, c], data: acc }
            }
            Axis::Cols => {
                let data = (0..r)
                    .map(|i| ta.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor { shape: vec![r, 1], data }
            }
        };
        self.record("mean_pool", t, Op::MeanPool(a, axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("concat_rows needs at least one input".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += r;
            data.extend_from_slice(&t.data);
        }
        self.record(
            "concat_rows",
            Tensor { shape: vec![rows, cols], data },
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if indices.is_empty() {
            return Err(TensorError::Usage("select_rows needs at least one index".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::Usage(format!("row index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        self.record(
            "select_rows",
            Tensor { shape: vec![indices.len(), c], data },
            Op::SelectRows(a, indices.to_vec()),
            &[a],
        )
    }

    /// Single entry `a[i, j]` as a `[1, 1]` value.
    pub fn element(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if i >= r || j >= c {
            return Err(TensorError::Usage(format!("element ({i},{j}) out of range for {r}x{c}")));
        }
        let v = ta.data[i * c + j];
        self.record("element", Tensor::scalar(v), Op::Element(a, i, j), &[a])
    }

    /// L2-normalizes each row. Rows with norm below 1e-12 are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let n = l2_norm(row);
            if n <= 1e-12 {
                return Err(TensorError::NonFinite { op: "normalize_rows" });
            }
            data.extend(row.iter().map(|x| x / n));
        }
        self.record("normalize_rows", Tensor { shape: vec![r, c], data }, Op::NormalizeRows(a), &[a])
    }

    /// Cosine similarity of two row vectors as a `[1, 1]` value.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb || sa[0] != 1 {
            return Err(shape_err("cosine_similarity", &sa, &sb));
        }
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        self.sum(prod)
    }

    /// Causal token mixing: `out[i] = sum_{j <= i} weights[i, j] * input[j]`.
    /// `weights` is `[L, L]` and `input` has at most `L` rows.
    pub fn causal_mix(&mut self, weights: Var, input: Var) -> Result<Var> {
        let (tw, tx) = (self.value(weights), self.value(input));
        let (wl, wl2) = tw.dims2()?;
        let (n, d) = tx.dims2()?;
        if wl != wl2 || n > wl {
            return Err(shape_err("causal_mix", tw.shape(), tx.shape()));
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..=i {
                let w = tw.data[i * wl + j];
                for k in 0..d {
                    data[i * d + k] += w * tx.data[j * d + k];
                }
            }
        }
        self.record(
            "causal_mix",
            Tensor { shape: vec![n, d], data },
            Op::CausalMix { weights, input },
            &[weights, input],
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("add", ta, tb).expect("checked in forward");
                let cols = ta.cols();
                self.accumulate(grads, *b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[b_index(kind, i, cols)] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("mul", ta, tb).expect("checked in forward");
                let cols = ta.cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * tb.data[b_index(kind, i, cols)];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[b_index(kind, i, cols)] += gi * ta.data[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("rank 2");
                let n = tb.cols();
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                // out is [r, c] = a^T, so a is [c, r]
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), gi) in ga.iter_mut().zip(&out.data).zip(g) {
                        *x += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), gi) in ga.iter_mut().zip(&out.data).zip(g) {
                        *x += gi * y;
                    }
                });
            }
            Op::Softmax(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        let s = &out.data[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let inner = dot(s, gr);
                        for j in 0..c {
                            ga[i * c + j] += s[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = self.value(*logits);
                let (r, c) = tl.dims2().expect("rank 2");
                let scale = g[0] / r as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let p = softmax_slice(&tl.data[i * c..(i + 1) * c]);
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::MeanPool(a, axis) => {
                let (r, c) = self.value(*a).dims2().expect("rank 2");
                self.accumulate(grads, *a, |ga| match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j] / r as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[i] / c as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::SelectRows(a, indices) => {
                let c = out.shape[1];
                self.accumulate(grads, *a, |ga| {
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Element(a, i, j) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| ga[i * c + j] += g[0]);
            }
            Op::NormalizeRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        let x = &ta.data[i * c..(i + 1) * c];
                        let y = &out.data[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let n = l2_norm(x);
                        let inner = dot(y, gr);
                        for j in 0..c {
                            ga[i * c + j] += (gr[j] - y[j] * inner) / n;
                        }
                    }
                });
            }
            Op::CausalMix { weights, input } => {
                let (tw, tx) = (self.value(*weights), self.value(*input));
                let wl = tw.shape[0];
                let (n, d) = (tx.shape[0], tx.shape[1]);
                self.accumulate(grads, *weights, |gw| {
                    for i in 0..n {
                        for j in 0..=i {
                            gw[i * wl + j] += dot(&g[i * d..(i + 1) * d], &tx.data[j * d..(j + 1) * d]);
                        }
                    }
                });
                self.accumulate(grads, *input, |gx| {
                    for i in 0..n {
                        for j in 0..=i {
                            let w = tw.data[i * wl + j];
                            for k in 0..d {
                                gx[j * d + k] += w * g[i * d + k];
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Max-subtracted softmax of one row.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
