//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Since nodes can
//! only reference earlier nodes, walking the tape backwards visits them in
//! reverse topological order.

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeometry, PoolGeometry};
use crate::numerics::tensor::RowMask;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    RowL2Normalize(NodeId),
    SoftmaxRows(NodeId, RowMask),
    LogSoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftTargetKl {
        logits: NodeId,
        targets: Tensor,
        probs: Tensor,
        tau: f64,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
        geom: PoolGeometry,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. One graph is built per training step and dropped after
/// the parameter update.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`. Nodes the loss does not
    /// depend on (or that are detached) get an all-zero tensor.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` with no tape edge back to it.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector (shape `[m]` or `[1, m]`) to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let m = bv.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % m];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).row_l2_normalize()?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::RowL2Normalize(a), rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[(usize, usize)]>) -> Result<NodeId> {
        let x = self.value(a);
        let v = x.softmax_rows(mask)?;
        let mask = RowMask::build(x.rows(), x.cols(), mask)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a, mask), rg))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).log_softmax_rows()?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::LogSoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// `τ² · mean_i Σ_k q_ik (ln q_ik − ln softmax(z_i/τ)_k)` with `0·ln 0 = 0`.
    ///
    /// `targets` is a constant: the gradient flows into `logits` only and is
    /// `τ/N · (p − q)`, which is exactly zero when `q` equals `p` bitwise.
    pub fn soft_target_kl(&mut self, logits: NodeId, targets: &Tensor, tau: f64) -> Result<NodeId> {
        let z = self.value(logits);
        z.require_matrix("soft_target_kl")?;
        if z.shape() != targets.shape() {
            return Err(Error::shape("soft_target_kl", z.shape(), targets.shape()));
        }
        let scaled = z.scale(1.0 / tau);
        let probs = scaled.softmax_rows(None)?;
        let log_probs = scaled.log_softmax_rows()?;
        let mut total = 0.0;
        for (&q, &lp) in targets.data().iter().zip(log_probs.data()) {
            if q > 0.0 {
                total += q * (q.ln() - lp);
            }
        }
        let n = z.rows() as f64;
        let v = Tensor::scalar(tau * tau * total / n);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            v,
            Op::SoftTargetKl {
                logits,
                targets: targets.clone(),
                probs,
                tau,
            },
            rg,
        ))
    }

    /// Same-padded, stride-1 2-D convolution over rows laid out as `C×H×W`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = conv::conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geom)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, input: NodeId, geom: PoolGeometry) -> Result<NodeId> {
        let (v, argmax) = conv::max_pool2_forward(self.value(input), &geom)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            v,
            Op::MaxPool2 {
                input,
                argmax,
                geom,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |id: NodeId, delta: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    send(*a, g.matmul_nt(bv)?);
                }
                if self.requires_grad(*b) {
                    send(*b, av.matmul_tn(g)?);
                }
            }
            Op::AddBias(x, bias) => {
                send(*x, g.clone());
                if self.requires_grad(*bias) {
                    let bshape = self.value(*bias).shape().to_vec();
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        db.iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                    }
                    send(*bias, Tensor::new(bshape, db)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    send(*a, g.zip_map(bv, "mul", |x, y| x * y)?);
                }
                if self.requires_grad(*b) {
                    send(*b, g.zip_map(av, "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?);
            }
            Op::Tanh(a) => {
                send(*a, g.zip_map(&node.value, "tanh", |gv, y| gv * (1.0 - y * y))?);
            }
            Op::RowL2Normalize(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut dx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                send(*a, dx);
            }
            Op::SoftmaxRows(a, _mask) => {
                // Masked outputs are exactly zero, so y ⊙ (…) zeroes their gradient.
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                send(*a, dx);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                send(*a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let s = g.data()[0] / x.len() as f64;
                send(*a, Tensor::full(x.shape(), s));
            }
            Op::SoftTargetKl {
                logits,
                targets,
                probs,
                tau,
            } => {
                let n = probs.rows() as f64;
                let c = g.data()[0] * tau / n;
                send(*logits, probs.zip_map(targets, "soft_target_kl", |p, q| c * (p - q))?);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    geom,
                    self.requires_grad(*input),
                )?;
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                send(*weight, dw);
                send(*bias, db);
            }
            Op::MaxPool2 { input, argmax, geom } => {
                send(*input, conv::max_pool2_backward(g, argmax, geom, self.value(*input).shape()));
            }
        }
        Ok(())
    }
}
