//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Node ids are handed
//! out in execution order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::orient::geometry::{cot_magnitude, cot_magnitude_grad, OrientationGeometry};
use crate::orient::oap;
use crate::tensor::norm::{batch_stats, bn_apply, bn_backward, BatchStats, BnSaved};
use crate::tensor::{
    self, conv2d_backward, conv2d_forward, hard_swish, hard_swish_grad, max_pool2d_with_argmax,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    HardSwish,
    Gelu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => tensor::relu(x),
            Activation::HardSwish => hard_swish(x),
            Activation::Gelu => tensor::gelu(x),
            Activation::Sigmoid => tensor::sigmoid(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::HardSwish => hard_swish_grad(x),
            Activation::Gelu => tensor::gelu_grad(x),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Lerp {
        a: NodeId,
        b: NodeId,
        t: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Act(NodeId, Activation),
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPoolHeight(NodeId),
    LinePool {
        input: NodeId,
        geom: Arc<OrientationGeometry>,
    },
    FoldBack {
        input: NodeId,
        geom: Arc<OrientationGeometry>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    Concat(NodeId, NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    MatMul(NodeId, NodeId),
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Dot {
        input: NodeId,
        weights: Tensor,
    },
    StepFraction {
        theta: NodeId,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Concat(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _)
            | Act(a, _)
            | AvgPoolHeight(a)
            | GlobalAvgPool(a)
            | Reshape(a)
            | Softmax(a)
            | Sum(a) => {
                vec![*a]
            }
            Lerp { a, b, t } => vec![*a, *b, *t],
            Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            MaxPool { input, .. }
            | LinePool { input, .. }
            | FoldBack { input, .. }
            | Dot { input, .. } => {
                vec![*input]
            }
            BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
            StepFraction { theta } => vec![*theta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the graph's nodes. Every leaf
/// created with [`Graph::param`] has an entry, zero if unreachable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|n| n.0 >= id) {
            return Err(Error::Graph(format!(
                "node {id} consumes node {} which does not precede it",
                bad.0
            )));
        }
        let requires_grad = inputs.iter().any(|n| self.nodes[n.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// `a + t (b - a)` for a one-element `t`.
    pub fn lerp(&mut self, a: NodeId, b: NodeId, t: NodeId) -> Result<NodeId> {
        let tv = self.value(t).item().ok_or_else(|| {
            Error::shape(format!(
                "lerp weight must be a scalar, got {:?}",
                self.value(t).shape()
            ))
        })?;
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + tv * (y - x))?;
        self.push(v, Op::Lerp { a, b, t })
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let v = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> Result<NodeId> {
        let v = self.value(x).map(|t| act.apply(t));
        self.push(v, Op::Act(x, act))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn max_pool(
        &mut self,
        x: NodeId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let (v, argmax) = max_pool2d_with_argmax(self.value(x), window, stride)?;
        self.push(v, Op::MaxPool { input: x, argmax })
    }

    pub fn avg_pool_height(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rank() != 4 {
            return Err(Error::shape("graph pooling expects [B,C,H,W]"));
        }
        let v = tensor::avg_pool_height(self.value(x))?;
        self.push(v, Op::AvgPoolHeight(x))
    }

    pub fn line_pool(&mut self, x: NodeId, geom: Arc<OrientationGeometry>) -> Result<NodeId> {
        if self.value(x).rank() != 4 {
            return Err(Error::shape("graph pooling expects [B,C,H,W]"));
        }
        let v = oap::oap_forward(self.value(x), &geom)?;
        self.push(v, Op::LinePool { input: x, geom })
    }

    pub fn fold_back(&mut self, x: NodeId, geom: Arc<OrientationGeometry>) -> Result<NodeId> {
        let v = oap::fold_back(self.value(x), &geom)?;
        self.push(v, Op::FoldBack { input: x, geom })
    }

    /// Batch normalization with batch statistics; returns the node and the
    /// statistics so the caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let xv = self.value(x);
        if xv.shape().first().copied().unwrap_or(0) < 2 {
            return Err(Error::invalid(
                "batchnorm training mode needs a batch of at least 2",
            ));
        }
        let stats = batch_stats(xv, self.value(gamma).len())?;
        let (v, saved) = bn_apply(
            xv,
            self.value(gamma),
            self.value(beta),
            &stats.mean,
            &stats.var,
            eps,
            true,
        )?;
        let id = self.push(
            v,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                saved,
            },
        )?;
        Ok((id, stats))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (v, saved) = bn_apply(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
            false,
        )?;
        self.push(
            v,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                saved,
            },
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::global_avg_pool(self.value(x))?;
        self.push(v, Op::GlobalAvgPool(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x))
    }

    /// Concatenates two `[B, D]` matrices along the feature axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (&[ra, da], &[rb, db]) = (self.value(a).shape(), self.value(b).shape()) else {
            return Err(Error::shape("concat expects two 2-D operands"));
        };
        if ra != rb {
            return Err(Error::shape(format!("concat rows differ: {ra} vs {rb}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (da + db));
        for r in 0..ra {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let v = Tensor::new([ra, da + db], out)?;
        self.push(v, Op::Concat(a, b))
    }

    /// `x Wᵀ + b` with `x: [B,D]`, `W: [K,D]`, `b: [K]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let (&[rows, d], &[k, wd]) = (xv.shape(), wv.shape()) else {
            return Err(Error::shape(format!(
                "linear expects [B,D] and [K,D], got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if d != wd || bv.shape() != [k] {
            return Err(Error::shape(format!(
                "linear input {:?}, weight {:?}, bias {:?} disagree",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        tensor::linalg::gemm(
            rows,
            d,
            k,
            (xv.data(), d as isize, 1),
            (wv.data(), 1, d as isize),
            1.0,
            &mut out,
        );
        let v = Tensor::new([rows, k], out)?;
        self.push(
            v,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(x))?;
        self.push(v, Op::Softmax(x))
    }

    /// Mean cross-entropy of `labels` under softmax of `[B,K]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let loss = tensor::cross_entropy(lv, labels)?;
        let probs = tensor::softmax_rows(lv)?.into_data();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// `Σ w ⊙ x` for a fixed weight tensor.
    pub fn dot_const(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        self.value(x).expect_same_shape(&weights)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot { input: x, weights })
    }

    /// `θ = π · sigmoid(raw)` for a one-element `raw`.
    pub fn theta_from_raw(&mut self, raw: NodeId) -> Result<NodeId> {
        let s = self.sigmoid(raw)?;
        self.scale(s, PI)
    }

    /// Fractional part `λ = max(|cot θ|, 1e-2) - floor(·)`, differentiable in
    /// θ with the integer part held fixed. Returns the node and the integer
    /// part.
    pub fn step_fraction(&mut self, theta: NodeId) -> Result<(NodeId, usize)> {
        let t = self
            .value(theta)
            .item()
            .ok_or_else(|| Error::shape("orientation must be a scalar"))?;
        crate::orient::geometry::check_theta(t)?;
        let s = cot_magnitude(t);
        let lower = s.floor();
        let id = self.push(Tensor::scalar(s - lower), Op::StepFraction { theta })?;
        Ok((id, lower as usize))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape().to_vec()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.local_grads(id, &g)? {
                if input.0 >= id {
                    return Err(Error::Graph(format!("cycle through node {id}")));
                }
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id];
        let val = |n: NodeId| &self.nodes[n.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.mul(val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, g.mul(val(*a))?));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.scale(*k))),
            Op::Lerp { a, b, t } => {
                let tv = val(*t).data()[0];
                if self.needs(*a) {
                    out.push((*a, g.scale(1.0 - tv)));
                }
                if self.needs(*b) {
                    out.push((*b, g.scale(tv)));
                }
                if self.needs(*t) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(val(*a).data().iter().zip(val(*b).data()))
                        .map(|(gg, (x, y))| gg * (y - x))
                        .sum();
                    out.push((*t, Tensor::new(val(*t).shape().to_vec(), vec![d])?));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                    bias.is_some_and(|b| self.needs(b)),
                )?;
                if let Some(gi) = grads.input {
                    out.push((*input, gi.reshape(val(*input).shape().to_vec())?));
                }
                out.push((*weight, grads.weight));
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    out.push((*b, gb));
                }
            }
            Op::Act(x, act) => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * act.derivative(xi, yi))
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = Tensor::zeros(val(*input).shape().to_vec());
                for (&src, &gg) in argmax.iter().zip(g.data()) {
                    gi.data_mut()[src] += gg;
                }
                out.push((*input, gi));
            }
            Op::AvgPoolHeight(x) => {
                let [b, c, h, w] = val(*x).dims4()?;
                let mut gi = vec![0.0; b * c * h * w];
                for (bc, gr) in g.data().chunks_exact(w).enumerate() {
                    for row in gi[bc * h * w..(bc + 1) * h * w].chunks_exact_mut(w) {
                        for (d, &v) in row.iter_mut().zip(gr) {
                            *d = v / h as f64;
                        }
                    }
                }
                out.push((*x, Tensor::new([b, c, h, w], gi)?));
            }
            Op::LinePool { input, geom } => out.push((*input, oap::oap_backward(g, geom)?)),
            Op::FoldBack { input, geom } => out.push((*input, oap::fold_back_backward(g, geom)?)),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (gi, gg, gb) = bn_backward(g, val(*gamma), saved)?;
                out.push((*input, gi));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::GlobalAvgPool(x) => {
                let [b, c, h, w] = val(*x).dims4()?;
                let n = (h * w) as f64;
                let mut gi = vec![0.0; b * c * h * w];
                for (plane, &gg) in gi.chunks_exact_mut(h * w).zip(g.data()) {
                    plane.fill(gg / n);
                }
                out.push((*x, Tensor::new([b, c, h, w], gi)?));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape().to_vec())?)),
            Op::Concat(a, b) => {
                let da = val(*a).shape()[1];
                let db = val(*b).shape()[1];
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for row in g.data().chunks_exact(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                out.push((*a, Tensor::new(val(*a).shape().to_vec(), ga)?));
                out.push((*b, Tensor::new(val(*b).shape().to_vec(), gb)?));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (xv, wv) = (val(*input), val(*weight));
                let (rows, d) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                if self.needs(*input) {
                    let mut gx = vec![0.0; rows * d];
                    tensor::linalg::gemm(
                        rows,
                        k,
                        d,
                        (g.data(), k as isize, 1),
                        (wv.data(), d as isize, 1),
                        0.0,
                        &mut gx,
                    );
                    out.push((*input, Tensor::new([rows, d], gx)?));
                }
                let mut gw = vec![0.0; k * d];
                tensor::linalg::gemm(
                    k,
                    rows,
                    d,
                    (g.data(), 1, k as isize),
                    (xv.data(), d as isize, 1),
                    0.0,
                    &mut gw,
                );
                out.push((*weight, Tensor::new([k, d], gw)?));
                let mut gb = vec![0.0; k];
                for row in g.data().chunks_exact(k) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                out.push((*bias, Tensor::new([k], gb)?));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    tensor::linalg::gemm(
                        m,
                        n,
                        k,
                        (g.data(), n as isize, 1),
                        (bv.data(), 1, n as isize),
                        0.0,
                        &mut ga,
                    );
                    out.push((*a, Tensor::new([m, k], ga)?));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    tensor::linalg::gemm(
                        k,
                        m,
                        n,
                        (av.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        0.0,
                        &mut gb,
                    );
                    out.push((*b, Tensor::new([k, n], gb)?));
                }
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut gi = Vec::with_capacity(g.len());
                for (y, gg) in node
                    .value
                    .data()
                    .chunks_exact(k)
                    .zip(g.data().chunks_exact(k))
                {
                    let dot: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                    gi.extend(y.iter().zip(gg).map(|(yi, gi)| yi * (gi - dot)));
                }
                out.push((*x, Tensor::new(val(*x).shape().to_vec(), gi)?));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = val(*logits).shape().to_vec();
                let (rows, k) = (shape[0], shape[1]);
                let s = g.data()[0] / rows as f64;
                let mut gi = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gi[r * k + y] -= 1.0;
                }
                gi.iter_mut().for_each(|v| *v *= s);
                out.push((*logits, Tensor::new(shape, gi)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))),
            Op::Dot { input, weights } => out.push((*input, weights.scale(g.data()[0]))),
            Op::StepFraction { theta } => {
                let t = val(*theta).data()[0];
                let d = g.data()[0] * cot_magnitude_grad(t);
                out.push((*theta, Tensor::new(val(*theta).shape().to_vec(), vec![d])?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hard_swish_gradient_at_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([4]));
        let y = g.activation(x, Activation::HardSwish).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!((v - 5.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_gradients_are_summed() {
        // y = relu(x) + sigmoid(x); compare with the two branches separately.
        let x0 = Tensor::new([3], vec![-0.4, 0.3, 1.7]).unwrap();
        let run = |use_relu: bool, use_sig: bool| -> Tensor {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let mut terms = Vec::new();
            if use_relu {
                terms.push(g.relu(x).unwrap());
            }
            if use_sig {
                terms.push(g.sigmoid(x).unwrap());
            }
            let y = if terms.len() == 2 {
                g.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap().get(x).unwrap().clone()
        };
        let both = run(true, true);
        let sep = run(true, false).add(&run(false, true)).unwrap();
        assert_eq!(both, sep);
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([2]));
        let unused = g.param(Tensor::ones([3, 1]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros([3, 1]));
    }

    #[test]
    fn constants_receive_nothing() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones([2]));
        let x = g.param(Tensor::ones([2]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([1, 2, 3, 3], |i| (i as f64 * 0.37).sin()));
        let w = g.param(Tensor::from_fn([2, 2, 3, 3], |i| (i as f64 * 0.11).cos()));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.sigmoid(y).unwrap();
        let s = g.sum(y).unwrap();
        let a = g.backward(s).unwrap();
        let b = g.backward(s).unwrap();
        assert_eq!(a.get(w), b.get(w));
        assert_eq!(a.get(x), b.get(x));
    }
}
