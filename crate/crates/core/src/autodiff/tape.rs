use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// The `k` smallest values, ascending.
    MinK(usize),
    /// The `k` largest values, descending.
    MaxK(usize),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Unary(UnaryOp, usize),
    NegLog { input: usize, floor: f64 },
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Gather(usize, Vec<usize>),
    Concat(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape over dense tensors.
///
/// One tape per forward pass. Every operation records its output node after
/// its inputs, so the node list is already in topological order and
/// [`Tape::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
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

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Result<Var, TensorError> {
        if tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        tensor.grad = None;
        Ok(self.push(tensor, Op::Leaf))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, TensorError> {
        self.leaf(tensor.with_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> Result<Var, TensorError> {
        self.leaf(tensor.with_grad(true))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index].value
    }

    pub fn data(&self, var: Var) -> &[f64] {
        self.value(var).data()
    }

    /// Gradient left on `var` by the last backward pass.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.value(var).grad.as_deref()
    }

    fn check(&self, var: Var) -> Result<&Tensor, TensorError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[var.index].value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index,
        }
    }

    fn record(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs
            .iter()
            .any(|&i| self.nodes[i].value.requires_grad);
        let value = Tensor::from_parts(shape, data).with_grad(requires_grad);
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (l, r) => {
                return Err(TensorError::Shape {
                    op: "matmul",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.record("matmul", vec![m, n], out, Op::MatMul(a.index, b.index), &[a.index, b.index])
    }

    /// Elementwise binary operation. Operands must have equal shapes, or one
    /// of them must hold a single element.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let shape = broadcast_shape(ta, tb).ok_or_else(|| TensorError::Shape {
            op: "elementwise",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let numel = shape.iter().product::<usize>();
        let (da, db) = (ta.data(), tb.data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out: Vec<f64> = (0..numel)
            .map(|i| {
                let (x, y) = (at(da, i), at(db, i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                }
            })
            .collect();
        self.record("elementwise", shape, out, Op::Binary(op, a.index, b.index), &[a.index, b.index])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.check(a)?, self.check(bias)?);
        let n = match (ta.shape(), tb.shape()) {
            ([_, n], [n2]) if n == n2 => *n,
            (l, r) => {
                return Err(TensorError::Shape {
                    op: "add_row",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let bias_data = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias_data[i % n])
            .collect();
        let shape = ta.shape().to_vec();
        self.record("add_row", shape, out, Op::AddRow(a.index, bias.index), &[a.index, bias.index])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        let out = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        self.record("scale", shape, out, Op::Scale(a.index, factor), &[a.index])
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Abs => f64::abs,
        };
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.record("elementwise", shape, out, Op::Unary(op, a.index), &[a.index])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Abs, a)
    }

    /// `-ln(max(x, floor))` elementwise.
    pub fn neg_log(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        let out = ta.data().iter().map(|&x| -x.max(floor).ln()).collect();
        let shape = ta.shape().to_vec();
        self.record("neg_log", shape, out, Op::NegLog { input: a.index, floor }, &[a.index])
    }

    /// Softmax over all elements of `a`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        if ta.numel() == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let out = softmax_raw(ta.data());
        let shape = ta.shape().to_vec();
        self.record("softmax", shape, out, Op::Softmax(a.index), &[a.index])
    }

    pub fn reduce(&mut self, op: Reduce, a: Var) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        let len = ta.numel();
        match op {
            Reduce::Sum => {
                let s = ta.data().iter().sum();
                self.record("sum", Vec::new(), vec![s], Op::Sum(a.index), &[a.index])
            }
            Reduce::Mean => {
                if len == 0 {
                    return Err(TensorError::Empty { op: "mean" });
                }
                let s = ta.data().iter().sum::<f64>() / len as f64;
                self.record("mean", Vec::new(), vec![s], Op::Mean(a.index), &[a.index])
            }
            Reduce::MinK(k) | Reduce::MaxK(k) => {
                if k > len {
                    return Err(TensorError::InvalidK { k, len });
                }
                let indices = if matches!(op, Reduce::MaxK(_)) {
                    top_k_indices(ta.data(), k)
                } else {
                    bottom_k_indices(ta.data(), k, &[])
                };
                self.gather(a, &indices)
            }
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(Reduce::Sum, a)
    }

    /// Picks elements of the flattened input; result is a vector of
    /// `indices.len()` elements. Backward scatters into the picked slots.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        let len = ta.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::IndexOutOfRange { index: bad, len });
        }
        let out = indices.iter().map(|&i| ta.data()[i]).collect();
        self.record(
            "gather",
            vec![indices.len()],
            out,
            Op::Gather(a.index, indices.to_vec()),
            &[a.index],
        )
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.check(p)?.data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let len = out.len();
        self.record("concat", vec![len], out, Op::Concat(idx.clone()), &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ta = self.check(a)?;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape,
            });
        }
        let out = ta.data().to_vec();
        self.record("reshape", shape, out, Op::Reshape(a.index), &[a.index])
    }

    /// Propagates d(output)/d(node) to every node recorded with
    /// `requires_grad`. Nodes that are not ancestors of `output` receive a
    /// zero gradient. Gradients from a previous call are overwritten.
    pub fn backward(&mut self, output: Var) -> Result<(), TensorError> {
        let out = self.check(output)?;
        if !out.is_scalar() {
            return Err(TensorError::NonScalarOutput {
                shape: out.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out.requires_grad {
            adjoints[output.index] = Some(vec![1.0]);
        }
        for idx in (0..=output.index).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut adjoints);
            adjoints[idx] = Some(upstream);
        }
        for (node, adj) in self.nodes.iter_mut().zip(adjoints) {
            if node.value.requires_grad {
                let g = adj.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.grad = Some(g);
            } else {
                node.value.grad = None;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].value.requires_grad;
        let mut acc = |i: usize, contrib: &mut dyn FnMut(&mut [f64])| {
            if !wants(i) {
                return;
            }
            let slot = adjoints[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
            contrib(slot);
        };
        let value = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |s| {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut sum = 0.0;
                            for j in 0..n {
                                sum += g[i * n + j] * tb.data()[p * n + j];
                            }
                            s[i * k + p] += sum;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &g[i * n..(i + 1) * n];
                            for (sj, gj) in s[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *sj += av * gj;
                            }
                        }
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let route = |s: &mut [f64], i: usize, v: f64| {
                    if s.len() == 1 {
                        s[0] += v;
                    } else {
                        s[i] += v;
                    }
                };
                acc(*a, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        let v = match op {
                            BinaryOp::Add | BinaryOp::Sub => *gi,
                            BinaryOp::Mul => gi * at(tb.data(), i),
                        };
                        route(s, i, v);
                    }
                });
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        let v = match op {
                            BinaryOp::Add => *gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * at(ta.data(), i),
                        };
                        route(s, i, v);
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    let n = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                });
            }
            Op::Scale(a, factor) => acc(*a, &mut |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi * factor;
                }
            }),
            Op::Unary(op, a) => {
                let x = nodes[*a].value.data();
                let y = value.data();
                acc(*a, &mut |s| {
                    for i in 0..g.len() {
                        let d = match op {
                            UnaryOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Tanh => 1.0 - y[i] * y[i],
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::NegLog { input, floor } => {
                let x = nodes[*input].value.data();
                acc(*input, &mut |s| {
                    for i in 0..g.len() {
                        if x[i] > *floor {
                            s[i] -= g[i] / x[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = value.data();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                acc(*a, &mut |s| {
                    for i in 0..y.len() {
                        s[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::Gather(a, indices) => acc(*a, &mut |s| {
                for (gi, &i) in g.iter().zip(indices) {
                    s[i] += gi;
                }
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Option<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Some(a.shape().to_vec())
    } else if a.numel() == 1 {
        Some(b.shape().to_vec())
    } else {
        None
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a slice.
pub fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Indices of the `k` largest values, descending; equal values keep the
/// lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(k);
    order
}

/// Indices of the `k` smallest values, ascending, skipping `exclude`; equal
/// values keep the lower index first.
pub fn bottom_k_indices(values: &[f64], k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).filter(|i| !exclude.contains(i)).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    order.truncate(k);
    order
}
