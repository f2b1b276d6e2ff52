//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are
//! already a topological order and backward is a single reverse sweep. A
//! graph is built per forward pass (bag sizes differ per patient) and
//! discarded after its one backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Relu(NodeId),
    Elu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Pow(NodeId, f64),
    ClampMin(NodeId, f64),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    Select(NodeId, usize),
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Pow(..) => "pow",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Select(..) => "select",
            Op::Detach => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
    backward_done: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `node`; zeros when nothing downstream depended on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => Tensor::from_parts(self.shapes[node.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn raw(&self, node: NodeId) -> Option<&[f64]> {
        self.grads[node.0].as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn softmax_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = softmax_strides(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = math::exp(src[idx(i)] - max);
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[idx(i)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant | Op::Detach => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b) => self.rg(*a) || self.rg(*b),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::ConcatCols(parts) => parts.iter().any(|p| self.rg(*p)),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Pow(a, _)
            | Op::ClampMin(a, _)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Reshape(a)
            | Op::Select(a, _) => self.rg(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// Name of the first operation that produced a NaN or infinity, if any.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.non_finite
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", av)?;
        let (k2, n) = require_matrix("matmul", bv)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = require_matrix("transpose", av)?;
        let src = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a)))
    }

    fn zip_with(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Div(a, b), a, b, |x, y| x / y)
    }

    /// Adds `row` (any shape with `cols(x)` values) to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.unary(a, Op::Shift(a), |x| x + shift)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { math::expm1(x) })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), math::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), math::sqrt)
    }

    pub fn pow(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.unary(a, Op::Pow(a, exponent), |x| math::powf(x, exponent))
    }

    /// `max(x, floor)`; gradient is blocked only where `x < floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, Op::ClampMin(a, floor), |x| if x < floor { floor } else { x })
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.shape().len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                av.shape()
            )));
        }
        let value = softmax_values(av, axis);
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = require_matrix("slice_cols", av)?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = (0..m)
            .flat_map(|r| av.row(r)[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = require_matrix("slice_rows", av)?;
        if len == 0 || start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = av.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, n], data), Op::SliceRows(a, start)))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (m, _) = require_matrix("concat_cols", self.value(first))?;
        let mut width = 0;
        for &p in parts {
            let (pm, pn) = require_matrix("concat_cols", self.value(p))?;
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            width += pn;
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![m, width], data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Extracts one element (flat index) as a shape-`[1]` tensor.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let av = self.value(a);
        let v = *av.data().get(index).ok_or_else(|| Error::Dimension {
            op: "select",
            lhs: av.shape().to_vec(),
            rhs: vec![index],
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Select(a, index)))
    }

    /// Identity on values; nothing flows back through it.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    /// Runs the reverse sweep from a scalar `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardRepeated);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if let Some(op) = self.non_finite {
            return Err(Error::NonFinite { op });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let val = |id: NodeId| &nodes[id.0].value;
            let mut send = |id: NodeId, contribution: Vec<f64>| {
                if nodes[id.0].requires_grad {
                    accumulate(&mut grads[id.0], contribution);
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant | Op::Detach => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let nn = bv.shape()[1];
                    if nodes[a.0].requires_grad {
                        send(*a, matmul_nt_raw(&g, bv.data(), m, nn, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, matmul_tn_raw(av.data(), &g, m, k, nn));
                    }
                }
                Op::Transpose(a) => {
                    let (m, nn) = (out.shape()[0], out.shape()[1]);
                    let mut back = vec![0.0; g.len()];
                    for r in 0..m {
                        for c in 0..nn {
                            back[c * m + r] = g[r * nn + c];
                        }
                    }
                    send(*a, back);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(bv).map(|(g, y)| g / y).collect());
                    send(
                        *b,
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
                Op::AddRow(x, row) => {
                    let c = out.cols();
                    let mut rg = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (acc, v) in rg.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    send(*row, rg);
                    send(*x, g);
                }
                Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
                Op::Shift(a) => send(*a, g),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    send(
                        *a,
                        g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Elu(a) => {
                    let x = val(*a).data();
                    let y = out.data();
                    send(
                        *a,
                        g.iter()
                            .zip(x.iter().zip(y))
                            .map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + 1.0) })
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = out.data();
                    send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Tanh(a) => {
                    let y = out.data();
                    send(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Log(a) => {
                    let x = val(*a).data();
                    send(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                Op::Sqrt(a) => {
                    let y = out.data();
                    send(*a, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect());
                }
                Op::Pow(a, p) => {
                    let x = val(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| g * p * math::powf(x, p - 1.0))
                            .collect(),
                    );
                }
                Op::ClampMin(a, floor) => {
                    let x = val(*a).data();
                    send(
                        *a,
                        g.iter().zip(x).map(|(g, &x)| if x < *floor { 0.0 } else { *g }).collect(),
                    );
                }
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = softmax_strides(out.shape(), *axis);
                    let y = out.data();
                    let mut back = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                back[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                    send(*a, back);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = out.cols();
                    let gv = val(*gain).data();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.len()];
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            dgain[c] += gr[c] * hr[c];
                            dbias[c] += gr[c];
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            dx[r * d + c] = inv * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    send(*gain, dgain);
                    send(*bias, dbias);
                    send(*x, dx);
                }
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::SliceCols(a, start) => {
                    let (m, len) = (out.shape()[0], out.shape()[1]);
                    let n = val(*a).shape()[1];
                    let mut back = vec![0.0; m * n];
                    for r in 0..m {
                        back[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    send(*a, back);
                }
                Op::SliceRows(a, start) => {
                    let n = out.shape()[1];
                    let mut back = vec![0.0; val(*a).numel()];
                    back[start * n..start * n + g.len()].copy_from_slice(&g);
                    send(*a, back);
                }
                Op::ConcatCols(parts) => {
                    let m = out.shape()[0];
                    let width = out.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let pn = val(p).shape()[1];
                        let mut back = Vec::with_capacity(m * pn);
                        for r in 0..m {
                            back.extend_from_slice(&g[r * width + offset..r * width + offset + pn]);
                        }
                        send(p, back);
                        offset += pn;
                    }
                }
                Op::Reshape(a) => send(*a, g),
                Op::Select(a, index) => {
                    let mut back = vec![0.0; val(*a).numel()];
                    back[*index] = g[0];
                    send(*a, back);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
