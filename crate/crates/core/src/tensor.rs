//! Dense n-dimensional tensors and a reverse-mode autodiff tape.
//!
//! The tape records operations during the forward pass and replays them in
//! reverse topological order on `backward`. Double precision throughout;
//! gradient checks against finite differences rely on it.
//!
//! Convolutions are fixed to 3x3 kernels, stride 1, zero padding 1, so spatial
//! extents are preserved. Down-sampling happens only through global average
//! pooling at the network head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new".into(),
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Elementwise -1/0/+1 with sign(0) = 0.
    pub fn sign(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Max absolute elementwise difference to another tensor of the same shape.
    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Elementwise sign with sign(0) = 0.
pub fn sign(t: &Tensor) -> Tensor {
    t.sign()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Operation kinds recordable on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    Dense,
    Relu,
    Swish,
    Add,
    Mul,
    Affine,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
    FloorScale,
    /// Sum of all elements down to a scalar; reduction helper for losses and tests.
    Sum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::Swish => "swish",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::FloorScale => "floor_scale",
            OpKind::Sum => "sum",
        }
    }
}

/// Per-operation attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpAttrs {
    None,
    FloorScale { beta: f64 },
    CrossEntropy { labels: Vec<usize> },
}

pub type NodeId = usize;

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    attrs: OpAttrs,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of recorded operations.
///
/// Node ids are topologically ordered by construction; `backward` walks them
/// in exact reverse order. A graph is single-use: after backward it only
/// serves gradient reads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    completed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            attrs: OpAttrs::None,
            value,
            needs_grad: requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if it required one.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id];
        node.grad
            .as_ref()
            .map(|g| Tensor { shape: node.value.shape.clone(), data: g.clone() })
    }

    fn push_op(&mut self, kind: OpKind, inputs: &[NodeId], attrs: OpAttrs, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            kind: NodeKind::Op(kind),
            inputs: inputs.to_vec(),
            attrs,
            value,
            needs_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    fn shape_err(op: OpKind, detail: String) -> Error {
        Error::ShapeMismatch { op: op.name().into(), detail }
    }

    /// Record one forward operation.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId], attrs: OpAttrs) -> Result<NodeId> {
        if self.completed {
            return Err(Error::InvalidArgument(
                "graph already consumed by backward".into(),
            ));
        }
        match kind {
            OpKind::Conv2d => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(Self::shape_err(kind, format!("expects 2 or 3 inputs, got {}", inputs.len())));
                }
                let value = {
                    let x = self.value(inputs[0]);
                    let w = self.value(inputs[1]);
                    let b = inputs.get(2).map(|&i| self.value(i));
                    conv2d_forward(x, w, b)?
                };
                Ok(self.push_op(kind, inputs, OpAttrs::None, value))
            }
            OpKind::Dense => {
                if inputs.len() != 3 {
                    return Err(Self::shape_err(kind, format!("expects [x, w, b], got {} inputs", inputs.len())));
                }
                let value = {
                    let x = self.value(inputs[0]);
                    let w = self.value(inputs[1]);
                    let b = self.value(inputs[2]);
                    dense_forward(x, w, b)?
                };
                Ok(self.push_op(kind, inputs, OpAttrs::None, value))
            }
            OpKind::Relu | OpKind::Swish => {
                if inputs.len() != 1 {
                    return Err(Self::shape_err(kind, "expects a single input".into()));
                }
                let x = self.value(inputs[0]);
                let data = match kind {
                    OpKind::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
                    _ => x.data.iter().map(|&v| v * sigmoid(v)).collect(),
                };
                let value = Tensor { shape: x.shape.clone(), data };
                Ok(self.push_op(kind, inputs, OpAttrs::None, value))
            }
            OpKind::Add | OpKind::Mul => {
                if inputs.len() != 2 {
                    return Err(Self::shape_err(kind, "expects two inputs".into()));
                }
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                if a.shape != b.shape {
                    return Err(Self::shape_err(
                        kind,
                        format!("operand shapes {:?} vs {:?}", a.shape, b.shape),
                    ));
                }
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&u, &v)| if kind == OpKind::Add { u + v } else { u * v })
                    .collect();
                let value = Tensor { shape: a.shape.clone(), data };
                Ok(self.push_op(kind, inputs, OpAttrs::None, value))
            }
            OpKind::Affine => {
                if inputs.len() != 3 {
                    return Err(Self::shape_err(kind, "expects [x, scale, shift]".into()));
                }
                let value = {
                    let x = self.value(inputs[0]);
                    let scale = self.value(inputs[1]);
                    let shift = self.value(inputs[2]);
                    affine_forward(x, scale, shift)?
                };
                Ok(self.push_op(kind, inputs, OpAttrs::None, value))
            }
            OpKind::GlobalAvgPool => {
                if inputs.len() != 1 {
                    return Err(Self::shape_err(kind, "expects a single input".into()));
                }
                let x = self.value(inputs[0]);
                if x.shape.len() != 4 {
                    return Err(Self::shape_err(kind, format!("expects NCHW input, got {:?}", x.shape)));
                }
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let area = (h * w) as f64;
                let mut data = vec![0.0; n * c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * h * w;
                        data[i * c + ch] = x.data[base..base + h * w].iter().sum::<f64>() / area;
                    }
                }
                let value = Tensor { shape: vec![n, c], data };
                Ok(self.push_op(kind, inputs, OpAttrs::None, value))
            }
            OpKind::SoftmaxCrossEntropy => {
                if inputs.len() != 1 {
                    return Err(Self::shape_err(kind, "expects [logits]".into()));
                }
                let labels = match &attrs {
                    OpAttrs::CrossEntropy { labels } => labels.clone(),
                    _ => return Err(Error::InvalidArgument("softmax_cross_entropy requires labels".into())),
                };
                let value = {
                    let logits = self.value(inputs[0]);
                    softmax_ce_forward(logits, &labels)?
                };
                Ok(self.push_op(kind, inputs, OpAttrs::CrossEntropy { labels }, value))
            }
            OpKind::FloorScale => {
                if inputs.len() != 1 {
                    return Err(Self::shape_err(kind, "expects a single input".into()));
                }
                let beta = match attrs {
                    OpAttrs::FloorScale { beta } => beta,
                    _ => return Err(Error::InvalidArgument("floor_scale requires beta".into())),
                };
                if beta <= 0.0 {
                    return Err(Error::InvalidArgument(format!("floor_scale beta must be > 0, got {beta}")));
                }
                let x = self.value(inputs[0]);
                let data = x.data.iter().map(|&v| (beta * v).floor() / beta).collect();
                let value = Tensor { shape: x.shape.clone(), data };
                Ok(self.push_op(kind, inputs, OpAttrs::FloorScale { beta }, value))
            }
            OpKind::Sum => {
                if inputs.len() != 1 {
                    return Err(Self::shape_err(kind, "expects a single input".into()));
                }
                let total: f64 = self.value(inputs[0]).data.iter().sum();
                Ok(self.push_op(kind, inputs, OpAttrs::None, Tensor::scalar(total)))
            }
        }
    }

    // Convenience wrappers.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Conv2d, &[x, w, b], OpAttrs::None)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Dense, &[x, w, b], OpAttrs::None)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Relu, &[x], OpAttrs::None)
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Swish, &[x], OpAttrs::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Add, &[a, b], OpAttrs::None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mul, &[a, b], OpAttrs::None)
    }

    pub fn affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Affine, &[x, scale, shift], OpAttrs::None)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::GlobalAvgPool, &[x], OpAttrs::None)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.forward_op(
            OpKind::SoftmaxCrossEntropy,
            &[logits],
            OpAttrs::CrossEntropy { labels: labels.to_vec() },
        )
    }

    pub fn floor_scale(&mut self, x: NodeId, beta: f64) -> Result<NodeId> {
        self.forward_op(OpKind::FloorScale, &[x], OpAttrs::FloorScale { beta })
    }

    pub fn reduce_to_scalar(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sum, &[x], OpAttrs::None)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively across
    /// fan-out. The graph no longer accepts new operations afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.completed {
            return Err(Error::InvalidArgument("backward already ran on this graph".into()));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.nodes[loss].value.shape.clone()));
        }
        self.completed = true;
        if !self.nodes[loss].needs_grad {
            return Ok(());
        }
        self.nodes[loss].grad = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].kind, NodeKind::Leaf) {
                continue;
            }
            let dout = self.nodes[id].grad.take().expect("grad present");
            let kind = match self.nodes[id].kind {
                NodeKind::Op(k) => k,
                NodeKind::Leaf => unreachable!(),
            };
            let inputs = self.nodes[id].inputs.clone();
            let input_grads = self.op_backward(kind, id, &inputs, &dout)?;
            for (slot, grad) in input_grads.into_iter().enumerate() {
                let Some(grad) = grad else { continue };
                let input = inputs[slot];
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut self.nodes[input].grad {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += g;
                        }
                    }
                    None => self.nodes[input].grad = Some(grad),
                }
            }
            // Keep grads only on leaves so they remain readable after the pass.
            if self.nodes[id].needs_grad {
                self.nodes[id].grad = Some(dout);
            }
        }
        Ok(())
    }

    fn op_backward(
        &self,
        kind: OpKind,
        id: NodeId,
        inputs: &[NodeId],
        dout: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let needs: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
        match kind {
            OpKind::Conv2d => {
                let x = self.value(inputs[0]);
                let w = self.value(inputs[1]);
                let (dx, dw, db) = conv2d_backward(x, w, dout, needs[0], needs[1], inputs.len() == 3);
                let mut grads = vec![dx, dw];
                if inputs.len() == 3 {
                    grads.push(db);
                }
                Ok(grads)
            }
            OpKind::Dense => {
                let x = self.value(inputs[0]);
                let w = self.value(inputs[1]);
                let (n, d) = (x.shape[0], x.shape[1]);
                let k = w.shape[0];
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..k {
                            let g = dout[i * k + j];
                            if g == 0.0 {
                                continue;
                            }
                            let wrow = &w.data[j * d..(j + 1) * d];
                            for (dv, &wv) in dx[i * d..(i + 1) * d].iter_mut().zip(wrow) {
                                *dv += g * wv;
                            }
                        }
                    }
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; k * d];
                    for i in 0..n {
                        let xrow = &x.data[i * d..(i + 1) * d];
                        for j in 0..k {
                            let g = dout[i * k + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (dv, &xv) in dw[j * d..(j + 1) * d].iter_mut().zip(xrow) {
                                *dv += g * xv;
                            }
                        }
                    }
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; k];
                    for i in 0..n {
                        for j in 0..k {
                            db[j] += dout[i * k + j];
                        }
                    }
                    db
                });
                Ok(vec![dx, dw, db])
            }
            OpKind::Relu => {
                let x = self.value(inputs[0]);
                let dx = needs[0].then(|| {
                    x.data
                        .iter()
                        .zip(dout)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect()
                });
                Ok(vec![dx])
            }
            OpKind::Swish => {
                let x = self.value(inputs[0]);
                let dx = needs[0].then(|| {
                    x.data
                        .iter()
                        .zip(dout)
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect()
                });
                Ok(vec![dx])
            }
            OpKind::Add => {
                let da = needs[0].then(|| dout.to_vec());
                let db = needs[1].then(|| dout.to_vec());
                Ok(vec![da, db])
            }
            OpKind::Mul => {
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                let da = needs[0].then(|| b.data.iter().zip(dout).map(|(&v, &g)| v * g).collect());
                let db = needs[1].then(|| a.data.iter().zip(dout).map(|(&v, &g)| v * g).collect());
                Ok(vec![da, db])
            }
            OpKind::Affine => {
                let x = self.value(inputs[0]);
                let scale = self.value(inputs[1]);
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let area = h * w;
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; x.numel()];
                    for i in 0..n {
                        for ch in 0..c {
                            let s = scale.data[ch];
                            let base = (i * c + ch) * area;
                            for k in 0..area {
                                dx[base + k] = s * dout[base + k];
                            }
                        }
                    }
                    dx
                });
                let dscale = needs[1].then(|| {
                    let mut ds = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * area;
                            for k in 0..area {
                                ds[ch] += x.data[base + k] * dout[base + k];
                            }
                        }
                    }
                    ds
                });
                let dshift = needs[2].then(|| {
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * area;
                            for k in 0..area {
                                db[ch] += dout[base + k];
                            }
                        }
                    }
                    db
                });
                Ok(vec![dx, dscale, dshift])
            }
            OpKind::GlobalAvgPool => {
                let x = self.value(inputs[0]);
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let area = h * w;
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; x.numel()];
                    let inv = 1.0 / area as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            let g = dout[i * c + ch] * inv;
                            let base = (i * c + ch) * area;
                            for k in 0..area {
                                dx[base + k] = g;
                            }
                        }
                    }
                    dx
                });
                Ok(vec![dx])
            }
            OpKind::SoftmaxCrossEntropy => {
                let logits = self.value(inputs[0]);
                let labels = match &self.nodes[id].attrs {
                    OpAttrs::CrossEntropy { labels } => labels,
                    _ => unreachable!(),
                };
                let (n, k) = (logits.shape[0], logits.shape[1]);
                let g = dout[0] / n as f64;
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let row = &logits.data[i * k..(i + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - m).exp() / sum;
                            dx[i * k + j] = g * (p - if j == labels[i] { 1.0 } else { 0.0 });
                        }
                    }
                    dx
                });
                Ok(vec![dx])
            }
            // Identity on the backward pass.
            OpKind::FloorScale => {
                let dx = needs[0].then(|| dout.to_vec());
                Ok(vec![dx])
            }
            OpKind::Sum => {
                let n = self.value(inputs[0]).numel();
                let dx = needs[0].then(|| vec![dout[0]; n]);
                Ok(vec![dx])
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let err = |detail: String| Error::ShapeMismatch { op: "conv2d".into(), detail };
    if x.shape.len() != 4 {
        return Err(err(format!("input must be NCHW, got {:?}", x.shape)));
    }
    if w.shape.len() != 4 || w.shape[2] != 3 || w.shape[3] != 3 {
        return Err(err(format!("kernel must be Fx C x3x3, got {:?}", w.shape)));
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let f = w.shape[0];
    if w.shape[1] != c {
        return Err(err(format!("kernel expects {} input channels, input has {}", w.shape[1], c)));
    }
    if let Some(b) = b {
        if b.shape != [f] {
            return Err(err(format!("bias shape {:?} does not match {} filters", b.shape, f)));
        }
    }
    let mut out = vec![0.0; n * f * h * wd];
    for i in 0..n {
        for of in 0..f {
            let orow_base = (i * f + of) * h * wd;
            if let Some(b) = b {
                let bv = b.data[of];
                for v in &mut out[orow_base..orow_base + h * wd] {
                    *v = bv;
                }
            }
            for ic in 0..c {
                let x_base = (i * c + ic) * h * wd;
                let w_base = (of * c + ic) * 9;
                for ky in 0..3usize {
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        let xrow = &x.data[x_base + iy * wd..x_base + (iy + 1) * wd];
                        let orow = &mut out[orow_base + oy * wd..orow_base + (oy + 1) * wd];
                        for kx in 0..3usize {
                            let wv = w.data[w_base + ky * 3 + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            // ix = ox + kx - 1 must land in [0, wd)
                            let ox_lo = if kx == 0 { 1 } else { 0 };
                            let ox_hi = if kx == 2 { wd - 1 } else { wd };
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, f, h, wd], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    has_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let f = w.shape[0];
    let mut dx = need_dx.then(|| vec![0.0; x.numel()]);
    let mut dw = need_dw.then(|| vec![0.0; w.numel()]);
    let mut db = has_bias.then(|| vec![0.0; f]);

    for i in 0..n {
        for of in 0..f {
            let d_base = (i * f + of) * h * wd;
            if let Some(db) = db.as_mut() {
                db[of] += dout[d_base..d_base + h * wd].iter().sum::<f64>();
            }
            for ic in 0..c {
                let x_base = (i * c + ic) * h * wd;
                let w_base = (of * c + ic) * 9;
                for ky in 0..3usize {
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        let drow = &dout[d_base + oy * wd..d_base + (oy + 1) * wd];
                        for kx in 0..3usize {
                            let ox_lo = if kx == 0 { 1 } else { 0 };
                            let ox_hi = if kx == 2 { wd - 1 } else { wd };
                            if let Some(dw) = dw.as_mut() {
                                let xrow = &x.data[x_base + iy * wd..x_base + (iy + 1) * wd];
                                let mut acc = 0.0;
                                for ox in ox_lo..ox_hi {
                                    acc += drow[ox] * xrow[ox + kx - 1];
                                }
                                dw[w_base + ky * 3 + kx] += acc;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wv = w.data[w_base + ky * 3 + kx];
                                if wv != 0.0 {
                                    let xrow =
                                        &mut dx[x_base + iy * wd..x_base + (iy + 1) * wd];
                                    for ox in ox_lo..ox_hi {
                                        xrow[ox + kx - 1] += wv * drow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = |detail: String| Error::ShapeMismatch { op: "dense".into(), detail };
    if x.shape.len() != 2 || w.shape.len() != 2 {
        return Err(err(format!("x {:?} and w {:?} must both be 2-d", x.shape, w.shape)));
    }
    let (n, d) = (x.shape[0], x.shape[1]);
    let k = w.shape[0];
    if w.shape[1] != d {
        return Err(err(format!("w expects {} features, x has {}", w.shape[1], d)));
    }
    if b.shape != [k] {
        return Err(err(format!("bias shape {:?} does not match {} outputs", b.shape, k)));
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let xrow = &x.data[i * d..(i + 1) * d];
        for j in 0..k {
            let wrow = &w.data[j * d..(j + 1) * d];
            let mut acc = b.data[j];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            out[i * k + j] = acc;
        }
    }
    Tensor::new(vec![n, k], out)
}

fn affine_forward(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let err = |detail: String| Error::ShapeMismatch { op: "affine".into(), detail };
    if x.shape.len() != 4 {
        return Err(err(format!("input must be NCHW, got {:?}", x.shape)));
    }
    let c = x.shape[1];
    if scale.shape != [c] || shift.shape != [c] {
        return Err(err(format!(
            "scale {:?} / shift {:?} must be per-channel [{}]",
            scale.shape, shift.shape, c
        )));
    }
    let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let area = h * w;
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let (s, t) = (scale.data[ch], shift.data[ch]);
            let base = (i * c + ch) * area;
            for k in 0..area {
                out[base + k] = s * x.data[base + k] + t;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let err = |detail: String| Error::ShapeMismatch { op: "softmax_cross_entropy".into(), detail };
    if logits.shape.len() != 2 {
        return Err(err(format!("logits must be NxK, got {:?}", logits.shape)));
    }
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(err(format!("{} labels for {} rows", labels.len(), n)));
    }
    let mut total = 0.0;
    for i in 0..n {
        let label = labels[i];
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                label, k
            )));
        }
        let row = &logits.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(Tensor::scalar(total / n as f64))
}
