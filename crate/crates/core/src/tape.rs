//! Reverse-mode differentiation over a tape of coarse tensor primitives.
//!
//! Every primitive appends one node holding its output value and enough
//! context to apply its adjoint. Nodes are created in topological order, so
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use fpcm_core::tape::Tape;
//! use fpcm_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, channel_dims};
use crate::spectral::{self, FreqFilter};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Sigmoid,
    Relu,
}

/// Per-channel statistics of one batch-norm call in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Statistics are fixed (inference); gradients do not flow through them.
        frozen: bool,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelConv1d {
        x: Var,
        w: Var,
    },
    Lowpass {
        x: Var,
        filter: Arc<FreqFilter>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        row_kl: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is used by one thread; it is consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves that require them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::contract(format!(
                "primitive {} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it requires gradients iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that requires gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies a node's value into a fresh constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Elementwise binary operation. Besides equal shapes, one side may be a
    /// single-element tensor, which is broadcast.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else if ta.numel() == 1 {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Binary { kind, a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let value = match kind {
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Relu => x.map(|v| v.max(0.0)),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    /// `scale * a + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|v| scale * v + shift);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Affine { a, scale }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul { a, b }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad)?;
        let rg = self.any_grad(&[x, w]);
        self.push(value, Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`N x C x ...`).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (n, c, inner) = channel_dims(tx.shape())?;
        if tb.shape() != [c] {
            return Err(Error::shape(format!(
                "channel bias of shape {:?} for {c} channels",
                tb.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bias = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        debug_assert_eq!(out.len(), n * c * inner);
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.any_grad(&[x, b]);
        self.push(value, Op::ChannelBias { x, b }, rg)
    }

    /// Multiplies channel `c` of sample `n` of `x` by `s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let (n, c, inner) = channel_dims(tx.shape())?;
        if ts.shape() != [n, c] {
            return Err(Error::shape(format!(
                "channel scales of shape {:?} for input {:?}",
                ts.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for (chunk, &k) in out.chunks_mut(inner).zip(ts.data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.any_grad(&[x, s]);
        self.push(value, Op::ScaleChannels { x, s }, rg)
    }

    /// Batch normalization with statistics of the current batch, taken per
    /// channel over the batch and all trailing positions.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let tx = &self.nodes[x.0].value;
        let (n, c, inner) = channel_dims(tx.shape())?;
        self.expect_channel_vec(gamma, c)?;
        self.expect_channel_vec(beta, c)?;
        let m = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, chunk) in tx.data().chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (i, chunk) in tx.data().chunks(inner).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased = var
            .iter()
            .map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = self.normalize(x, gamma, beta, &mean, inv_std, false)?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed per-channel statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = channel_dims(self.nodes[x.0].value.shape())?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics do not match channel count"));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, true)
    }

    fn expect_channel_vec(&self, v: Var, c: usize) -> Result<()> {
        let shape = self.nodes[v.0].value.shape();
        if shape != [c] {
            return Err(Error::shape(format!(
                "per-channel vector of shape {shape:?} for {c} channels"
            )));
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        frozen: bool,
    ) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (_, c, inner) = channel_dims(tx.shape())?;
        self.expect_channel_vec(gamma, c)?;
        self.expect_channel_vec(beta, c)?;
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut xhat = tx.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (i, (xh, o)) in xhat.chunks_mut(inner).zip(out.chunks_mut(inner)).enumerate() {
            let ch = i % c;
            for (xv, ov) in xh.iter_mut().zip(o.iter_mut()) {
                *xv = (*xv - mean[ch]) * inv_std[ch];
                *ov = g[ch] * *xv + b[ch];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
            },
            rg,
        )
    }

    /// Mean over all positions after the channel axis: `N x C x ...` to `N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, c, inner) = channel_dims(tx.shape())?;
        let data = tx
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c], data);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::GlobalAvgPool { x }, rg)
    }

    /// Circular 1D convolution across the channel axis of an `N x C` input
    /// with an odd-length kernel `w`, centred on each channel:
    /// `y[n, c] = sum_j w[j] x[n, (c + j - k/2) mod C]`.
    pub fn channel_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        tx.expect_rank(2, "channel conv input")?;
        tw.expect_rank(1, "channel conv kernel")?;
        let k = tw.numel();
        if k % 2 == 0 {
            return Err(Error::shape(format!("channel conv kernel must be odd, got {k}")));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let r = k / 2;
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let row = &tx.data()[s * c..(s + 1) * c];
            for ch in 0..c {
                out[s * c + ch] = tw
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, wj)| wj * row[(ch + j + c * k - r) % c])
                    .sum();
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        let rg = self.any_grad(&[x, w]);
        self.push(value, Op::ChannelConv1d { x, w }, rg)
    }

    /// Low band of every trailing `H x W` plane under a real symmetric mask.
    pub fn lowpass(&mut self, x: Var, filter: Arc<FreqFilter>) -> Result<Var> {
        let value = spectral::lowpass(&self.nodes[x.0].value, &filter)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Lowpass { x, filter }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean { a }, rg)
    }

    fn expect_logits(&self, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        t.expect_rank(2, "logits")?;
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Mean softmax cross-entropy of `N x K` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.expect_logits(logits)?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let t = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(k).zip(labels) {
            let lp = kernels::log_softmax(row);
            loss -= lp[y];
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.any_grad(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Batch mean of `KL(softmax(p) || softmax(q))` over rows of logits.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, k) = self.expect_logits(p)?;
        if self.expect_logits(q)? != (n, k) {
            return Err(Error::shape("KL divergence needs equally shaped logits"));
        }
        let (tp, tq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        let mut p_probs = Vec::with_capacity(n * k);
        let mut q_probs = Vec::with_capacity(n * k);
        let mut row_kl = Vec::with_capacity(n);
        for (rp, rq) in tp.data().chunks(k).zip(tq.data().chunks(k)) {
            let (lp, lq) = (kernels::log_softmax(rp), kernels::log_softmax(rq));
            row_kl.push(lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>());
            p_probs.extend(lp.iter().map(|v| v.exp()));
            q_probs.extend(lq.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(row_kl.iter().sum::<f64>() / n as f64);
        let rg = self.any_grad(&[p, q]);
        self.push(
            value,
            Op::KlDiv {
                p,
                q,
                p_probs,
                q_probs,
                row_kl,
            },
            rg,
        )
    }

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires them. Leaves with no path to the loss get zero gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.adjoint(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(Var(i), g);
            }
        }
        Ok(out)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let gs = g.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let n = node.value.numel();
                let at = |t: &Tensor, i: usize| {
                    if t.numel() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (gs.to_vec(), gs.to_vec()),
                    BinaryKind::Sub => (gs.to_vec(), gs.iter().map(|v| -v).collect()),
                    BinaryKind::Mul => (
                        (0..n).map(|i| gs[i] * at(tb, i)).collect(),
                        (0..n).map(|i| gs[i] * at(ta, i)).collect(),
                    ),
                };
                let reduce = |t: &Tensor, full: Vec<f64>| {
                    if t.numel() == 1 && n != 1 {
                        Tensor::from_parts(t.shape().to_vec(), vec![full.iter().sum()])
                    } else {
                        Tensor::from_parts(t.shape().to_vec(), full)
                    }
                };
                vec![(*a, reduce(ta, ga)), (*b, reduce(tb, gb))]
            }
            Op::Unary { kind, a } => {
                let y = node.value.data();
                let x = self.val(*a).data();
                let d: Vec<f64> = match kind {
                    UnaryKind::Exp => gs.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryKind::Sigmoid => gs.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryKind::Relu => gs
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                vec![(*a, Tensor::from_parts(node.value.shape().to_vec(), d))]
            }
            Op::Affine { a, scale } => vec![(*a, g.scale(*scale))],
            Op::MatMul { a, b } => {
                let (ga, gb) = kernels::matmul_backward(self.val(*a), self.val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.val(*x),
                    self.val(*w),
                    g,
                    *stride,
                    *pad,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                )?;
                gx.map(|t| (*x, t)).into_iter().chain(gw.map(|t| (*w, t))).collect()
            }
            Op::ChannelBias { x, b } => {
                let c = self.val(*b).numel();
                let (_, _, inner) = channel_dims(g.shape())?;
                let mut gb = vec![0.0; c];
                for (i, chunk) in gs.chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.clone()), (*b, Tensor::from_parts(vec![c], gb))]
            }
            Op::ScaleChannels { x, s } => {
                let (tx, ts) = (self.val(*x), self.val(*s));
                let (_, _, inner) = channel_dims(tx.shape())?;
                let mut gx = gs.to_vec();
                let mut gsc = vec![0.0; ts.numel()];
                for (i, (chunk, xs)) in gx.chunks_mut(inner).zip(tx.data().chunks(inner)).enumerate() {
                    gsc[i] = chunk.iter().zip(xs).map(|(g, x)| g * x).sum();
                    chunk.iter_mut().for_each(|v| *v *= ts.data()[i]);
                }
                vec![
                    (*x, Tensor::from_parts(tx.shape().to_vec(), gx)),
                    (*s, Tensor::from_parts(ts.shape().to_vec(), gsc)),
                ]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
            } => {
                let tx = self.val(*x);
                let (n, c, inner) = channel_dims(tx.shape())?;
                let gam = self.val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gc, xc)) in gs.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    sum_g[i % c] += gc.iter().sum::<f64>();
                    sum_gx[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
                let m = (n * inner) as f64;
                let mut gx = vec![0.0; tx.numel()];
                for (i, ((o, gc), xc)) in gx
                    .chunks_mut(inner)
                    .zip(gs.chunks(inner))
                    .zip(xhat.chunks(inner))
                    .enumerate()
                {
                    let ch = i % c;
                    let k = gam[ch] * inv_std[ch];
                    for ((ov, gv), xv) in o.iter_mut().zip(gc).zip(xc) {
                        *ov = if *frozen {
                            k * gv
                        } else {
                            k * (gv - sum_g[ch] / m - xv * sum_gx[ch] / m)
                        };
                    }
                }
                vec![
                    (*x, Tensor::from_parts(tx.shape().to_vec(), gx)),
                    (*gamma, Tensor::from_parts(vec![c], sum_gx)),
                    (*beta, Tensor::from_parts(vec![c], sum_g)),
                ]
            }
            Op::GlobalAvgPool { x } => {
                let tx = self.val(*x);
                let (_, _, inner) = channel_dims(tx.shape())?;
                let mut gx = Vec::with_capacity(tx.numel());
                for &gv in gs {
                    gx.extend(std::iter::repeat_n(gv / inner as f64, inner));
                }
                vec![(*x, Tensor::from_parts(tx.shape().to_vec(), gx))]
            }
            Op::ChannelConv1d { x, w } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let k = tw.numel();
                let r = k / 2;
                let mut gx = vec![0.0; n * c];
                let mut gw = vec![0.0; k];
                for s in 0..n {
                    let row = &tx.data()[s * c..(s + 1) * c];
                    for ch in 0..c {
                        let gv = gs[s * c + ch];
                        for j in 0..k {
                            let src = (ch + j + c * k - r) % c;
                            gx[s * c + src] += tw.data()[j] * gv;
                            gw[j] += row[src] * gv;
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(vec![n, c], gx)),
                    (*w, Tensor::from_parts(vec![k], gw)),
                ]
            }
            // The filtered round trip is real, linear and self-adjoint for a
            // real conjugate-symmetric mask.
            Op::Lowpass { x, filter } => vec![(*x, spectral::lowpass(g, filter)?)],
            Op::Sum { a } => {
                let t = self.val(*a);
                vec![(*a, Tensor::full(t.shape(), gs[0]))]
            }
            Op::Mean { a } => {
                let t = self.val(*a);
                vec![(*a, Tensor::full(t.shape(), gs[0] / t.numel() as f64))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let t = self.val(*logits);
                let (n, k) = (t.shape()[0], t.shape()[1]);
                let scale = gs[0] / n as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, Tensor::from_parts(vec![n, k], gl))]
            }
            Op::KlDiv {
                p,
                q,
                p_probs,
                q_probs,
                row_kl,
            } => {
                let t = self.val(*p);
                let (n, k) = (t.shape()[0], t.shape()[1]);
                let scale = gs[0] / n as f64;
                let mut gp = vec![0.0; n * k];
                let mut gq = vec![0.0; n * k];
                for r in 0..n {
                    for j in 0..k {
                        let i = r * k + j;
                        let (pp, qq) = (p_probs[i], q_probs[i]);
                        gq[i] = scale * (qq - pp);
                        gp[i] = scale * pp * ((pp.ln() - qq.ln()) - row_kl[r]);
                    }
                }
                vec![
                    (*p, Tensor::from_parts(vec![n, k], gp)),
                    (*q, Tensor::from_parts(vec![n, k], gq)),
                ]
            }
        })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "binary",
        Op::Unary { .. } => "unary",
        Op::Affine { .. } => "affine",
        Op::MatMul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ChannelBias { .. } => "channel_bias",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::BatchNorm { .. } => "batch_norm",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::ChannelConv1d { .. } => "channel_conv1d",
        Op::Lowpass { .. } => "lowpass",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDiv { .. } => "kl_div",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn add_equal_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn broadcast_rejects_incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[3], &[1., 2., 3.]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[3], &[1., 2., 3.]));
        let s = tape.param(t(&[1], &[2.]));
        let y = tape.mul(a, s).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[6.]);
        assert_eq!(g.get(a).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let z = tape.param(t(&[3], &[1., 2., 3.]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(z).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn constants_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1., 2.]));
        let p = tape.param(t(&[2], &[1., 1.]));
        let y = tape.mul(x, p).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.]));
        assert!(matches!(tape.exp(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_label_range() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0., 0.]));
        assert!(tape.cross_entropy(l, &[2]).is_err());
        let loss = tape.cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_hand_built_distributions() {
        // logits ln p give softmax p exactly.
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 2], &[0.9f64.ln(), 0.1f64.ln()]));
        let q = tape.constant(t(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]));
        let kl = tape.kl_div(p, q).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((tape.value(kl).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.368).abs() < 1e-3);
    }
}
