//! Reverse-mode differentiation over the layer set the detector uses.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes keep their output
//! values; [`Graph::backward`] walks them in reverse creation order and
//! accumulates parameter gradients into a [`Gradients`] buffer parallel to
//! the [`ParamStore`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm_apply, batch_norm_backward, channel_moments, concat_channels, conv2d_backward,
    conv2d_forward, upsample2x, upsample2x_backward, Activation, ConvGeometry, NormCache, Tensor,
    BN_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Role of a parameter; normalization parameters are exempt from weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Gradient buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(factor));
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// Running mean/variance of a normalization layer, updated in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv {
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    },
    Norm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        cache: NormCache,
    },
    Act {
        x: NodeId,
        act: Activation,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Upsample {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Graph {
    /// `training` selects batch statistics (and running-stat updates) in
    /// normalization layers.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn conv2d(
        &mut self,
        params: &ParamStore,
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let value = conv2d_forward(
            self.value(x),
            params.value(weight),
            bias.map(|b| params.value(b)),
            geom,
        )?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
            },
            true,
        ))
    }

    /// Batch normalization. In training mode the batch moments are used and
    /// folded into `stats`; otherwise `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        params: &ParamStore,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        stats: &mut RunningStats,
    ) -> Result<NodeId> {
        let input = self.value(x);
        if input.channels() != stats.mean.len() {
            return Err(Error::Shape(alloc::format!(
                "norm layer expects {} channels, got {}",
                stats.mean.len(),
                input.channels()
            )));
        }
        let cache = if self.training {
            let (mean, var) = channel_moments(input);
            let count = (input.batch() * input.height() * input.width()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..mean.len() {
                stats.mean[c] = (1.0 - stats.momentum) * stats.mean[c] + stats.momentum * mean[c];
                stats.var[c] =
                    (1.0 - stats.momentum) * stats.var[c] + stats.momentum * var[c] * unbias;
            }
            NormCache {
                inv_std: var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect(),
                mean,
                batch_stats: true,
            }
        } else {
            NormCache {
                mean: stats.mean.clone(),
                inv_std: stats.var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect(),
                batch_stats: false,
            }
        };
        let value = batch_norm_apply(input, params.value(gamma), params.value(beta), &cache);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                cache,
            },
            true,
        ))
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::Act { x, act }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(alloc::format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_channels(&tensors)?;
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = upsample2x(self.value(x), out_h, out_w)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Upsample { x }, rg))
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let input = self.value(x);
        let [batch, c, h, w] = input.shape();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut value = Tensor::zeros([batch, c, oh, ow]);
        let mut argmax = vec![0usize; value.len()];
        let mut k = 0;
        for n in 0..batch {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = (f64::NEG_INFINITY, 0usize);
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (y, xx) = ((2 * i + di) as isize - 1, (2 * j + dj) as isize - 1);
                                if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                                    continue;
                                }
                                let o = input.offset(n, ch, y as usize, xx as usize);
                                if input.data()[o] > best.0 {
                                    best = (input.data()[o], o);
                                }
                            }
                        }
                        value.data_mut()[k] = best.0;
                        argmax[k] = best.1;
                        k += 1;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    /// Back-propagates the seed gradients and accumulates parameter gradients.
    pub fn backward(
        &self,
        params: &ParamStore,
        seeds: Vec<(NodeId, Tensor)>,
        grads: &mut Gradients,
    ) -> Result<()> {
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::Shape(alloc::format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(id).shape()
                )));
            }
            accumulate(&mut node_grads[id.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*x), params.value(*weight), *geom, &dy, need_dx)?;
                    grads.accumulate(*weight, &dw);
                    if let Some(b) = bias {
                        grads.accumulate(*b, &db);
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut node_grads[x.0], dx);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) =
                        batch_norm_backward(self.value(*x), params.value(*gamma), cache, &dy);
                    grads.accumulate(*gamma, &dgamma);
                    grads.accumulate(*beta, &dbeta);
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut node_grads[x.0], dx);
                    }
                }
                Op::Act { x, act } => {
                    let mut dx = dy;
                    for (g, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *g *= act.derivative(*v);
                    }
                    accumulate(&mut node_grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut node_grads[b.0], dy.clone());
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut node_grads[a.0], dy);
                    }
                }
                Op::Concat { parts } => {
                    let [batch, _, h, w] = dy.shape();
                    let mut at = 0;
                    for p in parts {
                        let c = self.value(*p).channels();
                        if self.nodes[p.0].requires_grad {
                            let mut part = Tensor::zeros([batch, c, h, w]);
                            for n in 0..batch {
                                let src = &dy.sample(n)[at * h * w..(at + c) * h * w];
                                part.sample_mut(n).copy_from_slice(src);
                            }
                            accumulate(&mut node_grads[p.0], part);
                        }
                        at += c;
                    }
                }
                Op::Upsample { x } => {
                    let dx = upsample2x_backward(&dy, self.value(*x).shape());
                    accumulate(&mut node_grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (g, &src) in dy.data().iter().zip(argmax) {
                        dx.data_mut()[src] += g;
                    }
                    accumulate(&mut node_grads[x.0], dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}
