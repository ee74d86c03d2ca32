//! Parameterized building blocks: convolution, normalization, activation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamId, ParamKind, ParamStore, RunningStats};
use crate::tensor::{Activation, ConvGeometry, Tensor};

/// Normalization applied after convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    /// No normalization; convolutions carry a bias instead.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Non-trainable state: running statistics of normalization layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStore {
    buffers: Vec<(String, RunningStats)>,
}

impl BufferStore {
    pub fn add(&mut self, name: String, stats: RunningStats) -> BufferId {
        self.buffers.push((name, stats));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.buffers[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.buffers.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats)> {
        self.buffers.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)` (He, for rectified layers).
    He,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Dirac kernel: output channel `o` copies input channel `o`.
    Identity,
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

/// Convolution, optional normalization, optional activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Option<Norm>,
    pub act: Option<Activation>,
}

impl ConvBlock {
    /// Output after convolution and normalization, before the activation.
    pub fn forward_linear(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        buffers: &mut BufferStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = graph.conv2d(params, x, self.conv.weight, self.conv.bias, self.conv.geom)?;
        match &self.norm {
            Some(n) => graph.batch_norm(params, y, n.gamma, n.beta, buffers.get_mut(n.stats)),
            None => Ok(y),
        }
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        buffers: &mut BufferStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = self.forward_linear(graph, params, buffers, x)?;
        Ok(match self.act {
            Some(a) => graph.activation(y, a),
            None => y,
        })
    }
}

/// Parameter allocation context used while assembling a network.
pub struct Builder<'a, R: Rng> {
    pub params: &'a mut ParamStore,
    pub buffers: &'a mut BufferStore,
    pub rng: &'a mut R,
    pub norm: NormKind,
}

/// Geometry and initialization of one convolution block.
#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub act: Option<Activation>,
    pub init: Init,
    /// Apply the builder's normalization (when it has one).
    pub normalized: bool,
    /// Keep the bias off even without normalization here, because a
    /// normalization layer follows later (only honoured under batch norm).
    pub feeds_norm: bool,
}

impl ConvOpts {
    pub fn new(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            groups: 1,
            act: None,
            init: Init::He,
            normalized: true,
            feeds_norm: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn act(mut self, act: Activation) -> Self {
        self.act = Some(act);
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    /// Plain convolution with bias, no normalization.
    pub fn plain(mut self) -> Self {
        self.normalized = false;
        self
    }

    /// Convolution whose output is normalized further downstream: no
    /// normalization and, under batch norm, no bias.
    pub fn linear(mut self) -> Self {
        self.normalized = false;
        self.feeds_norm = true;
        self
    }
}

/// Standalone normalization followed by an activation (pre-activation
/// residual units).
#[derive(Debug, Clone)]
pub struct NormAct {
    pub norm: Option<Norm>,
    pub act: Activation,
}

impl NormAct {
    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        buffers: &mut BufferStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = match &self.norm {
            Some(n) => graph.batch_norm(params, x, n.gamma, n.beta, buffers.get_mut(n.stats))?,
            None => x,
        };
        Ok(graph.activation(y, self.act))
    }
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn conv_block(&mut self, name: &str, cin: usize, cout: usize, opts: ConvOpts) -> ConvBlock {
        let k = opts.kernel;
        let cin_g = cin / opts.groups;
        let fan_in = (cin_g * k * k) as f64;
        let shape = [cout, cin_g, k, k];
        let n: usize = shape.iter().product();
        let data = match opts.init {
            Init::He => {
                let bound = libm::sqrt(6.0 / fan_in);
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect(),
            Init::Identity => {
                let mut d = alloc::vec![0.0; n];
                for o in 0..cout.min(cin_g) {
                    d[((o * cin_g + o) * k + k / 2) * k + k / 2] = 1.0;
                }
                d
            }
        };
        let weight = self.params.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::from_vec(shape, data).expect("weight shape"),
        );
        let normalized = opts.normalized && self.norm == NormKind::Batch;
        let has_bias = !normalized && !(opts.feeds_norm && self.norm == NormKind::Batch);
        let bias = has_bias.then(|| {
            self.params.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros([1, cout, 1, 1]),
            )
        });
        let norm = normalized.then(|| self.norm_layer(&format!("{name}.norm"), cout));
        ConvBlock {
            conv: Conv {
                weight,
                bias,
                geom: ConvGeometry::new(opts.stride, k / 2, opts.groups),
            },
            norm,
            act: opts.act,
        }
    }

    fn norm_layer(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.params.add(
                format!("{name}.scale"),
                ParamKind::NormScale,
                Tensor::full([1, channels, 1, 1], 1.0),
            ),
            beta: self.params.add(
                format!("{name}.shift"),
                ParamKind::NormShift,
                Tensor::zeros([1, channels, 1, 1]),
            ),
            stats: self.buffers.add(name.into(), RunningStats::new(channels)),
        }
    }

    pub fn norm_act(&mut self, name: &str, channels: usize, act: Activation) -> NormAct {
        NormAct {
            norm: (self.norm == NormKind::Batch).then(|| self.norm_layer(name, channels)),
            act,
        }
    }
}
