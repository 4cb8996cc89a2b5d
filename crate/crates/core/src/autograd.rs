//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every node of one computation graph. Operations append a
//! node holding the forward value and the recipe for its backward rule, so the
//! node list is always in topological order and [`Tape::backward`] is a single
//! reverse sweep. Each graph is built and consumed on one thread; nothing is
//! shared between tapes.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: `(grad_out, inputs, output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Broadcast(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Abs(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Same product and gradient as [`Tape::matmul`], with the forward value
    /// from [`Tensor::matmul_order_free`].
    pub fn matmul_order_free(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_order_free(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// `x` (n×c) plus `row` (1×c) broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(x, row), &[x, row]))
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.numel() != 1 {
            return Err(Error::shape("broadcast", src.shape(), shape));
        }
        let v = Tensor::full(shape, src.item());
        Ok(self.push(v, Op::Broadcast(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(index)?;
        Ok(self.push(v, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).mean_axis(axis)?;
        Ok(self.push(v, Op::MeanAxis(a, axis), &[a]))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).gelu();
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = self
            .value(x)
            .layer_norm_parts(self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a), &[a])
    }

    /// `x·W + b` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_seeded(root, 1.0)
    }

    /// Reverse sweep from a one-element `root` whose incoming gradient is `seed`.
    pub fn backward_seeded(&self, root: Var, seed: f64) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), seed));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize_with(self.nodes.len(), || None);
        // Keep only leaves that asked for gradients; intermediates are discarded.
        for (id, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[id];
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, "mul", |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(va, "mul", |x, y| x * y)?);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let mut summed = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (s, x) in summed.iter_mut().zip(g.row_slice(i)) {
                            *s += x;
                        }
                    }
                    let shaped = Tensor::new(self.value(*row).shape().to_vec(), summed)?;
                    self.accumulate(grads, *row, shaped);
                }
            }
            Op::Broadcast(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.sum()));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_cols(start, start + width)?);
                    }
                    start += width;
                }
            }
            Op::GatherRows(a, index) => {
                if self.requires_grad(*a) {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut da = Tensor::zeros(src.shape());
                    for (out_row, &i) in index.iter().enumerate() {
                        let dst = &mut da.data_mut()[i * c..(i + 1) * c];
                        for (d, x) in dst.iter_mut().zip(g.row_slice(out_row)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires_grad(*a) {
                    let src = self.value(*a);
                    let (n, c) = (src.rows(), src.cols());
                    let w = g.cols();
                    let mut da = Tensor::zeros(src.shape());
                    for i in 0..n {
                        da.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::MeanAxis(a, axis) => {
                let src = self.value(*a);
                let (n, c) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(src.shape());
                for i in 0..n {
                    for j in 0..c {
                        da.data_mut()[i * c + j] = match axis {
                            0 => g.data()[j] / n as f64,
                            _ => g.data()[i] / c as f64,
                        };
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut da = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), "gelu", |gv, x| gv * gelu_grad(x))?;
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gain_v = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for i in 0..n {
                        let gr = g.row_slice(i);
                        let hr = xhat.row_slice(i);
                        let dh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[i] / c as f64;
                        for j in 0..c {
                            dx.data_mut()[i * c + j] = k * (c as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                let gain_shape = self.value(*gain).shape().to_vec();
                let bias_shape = self.value(*bias).shape().to_vec();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        let gv = g.data()[i * c + j];
                        dg[j] += gv * xhat.data()[i * c + j];
                        db[j] += gv;
                    }
                }
                self.accumulate(grads, *gain, Tensor::new(gain_shape, dg)?);
                self.accumulate(grads, *bias, Tensor::new(bias_shape, db)?);
            }
            Op::Abs(a) => {
                let da = g.zip_map(self.value(*a), "abs", |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let da = g.zip_map(&node.value, "sqrt", |gv, y| gv * 0.5 / y)?;
                self.accumulate(grads, *a, da);
            }
            Op::Recip(a) => {
                let da = g.zip_map(&node.value, "recip", |gv, y| -gv * y * y)?;
                self.accumulate(grads, *a, da);
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = rule(g, &values, &node.value);
                if contributions.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op returned {} gradients for {} inputs",
                        contributions.len(),
                        inputs.len()
                    )));
                }
                for (&v, c) in inputs.iter().zip(contributions) {
                    if c.shape() != self.value(v).shape() {
                        return Err(Error::shape("custom backward", c.shape(), self.value(v).shape()));
                    }
                    self.accumulate(grads, v, c);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
