//! Interchangeable context modules.
//!
//! Every variant is a small stack of 3x3 convolutions whose (selected)
//! outputs are concatenated back to `n` channels. Layers are normalized and
//! followed by a leaky rectifier; the tensors that enter the final
//! concatenation are taken before that rectifier, and one shared rectifier is
//! applied after the concatenation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{BufferStore, Builder, ConvBlock, ConvOpts};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::tensor::Activation;

/// Slope of the leaky rectifier used throughout the pyramid and context
/// modules.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Every variant requires the base filter count to be a multiple of this.
pub const CONTEXT_DIVISOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextVariant {
    Ssh,
    Ssh2,
    Rssh,
    Rssh2,
    Retina,
    Retina2,
    Dense,
    Dense2,
    Basic1,
    Basic2,
}

impl ContextVariant {
    pub const ALL: [ContextVariant; 10] = [
        ContextVariant::Ssh,
        ContextVariant::Ssh2,
        ContextVariant::Rssh,
        ContextVariant::Rssh2,
        ContextVariant::Retina,
        ContextVariant::Retina2,
        ContextVariant::Dense,
        ContextVariant::Dense2,
        ContextVariant::Basic1,
        ContextVariant::Basic2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextVariant::Ssh => "SSH",
            ContextVariant::Ssh2 => "SSH2",
            ContextVariant::Rssh => "RSSH",
            ContextVariant::Rssh2 => "RSSH2",
            ContextVariant::Retina => "Retina",
            ContextVariant::Retina2 => "Retina2",
            ContextVariant::Dense => "Dense",
            ContextVariant::Dense2 => "Dense2",
            ContextVariant::Basic1 => "Basic1",
            ContextVariant::Basic2 => "Basic2",
        }
    }

    /// Case-insensitive lookup by name.
    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn topology(self) -> Topology {
        use OutputPart::{Layer, Sum};
        let chain = |divisors: &[usize], output: &[OutputPart]| Topology {
            divisors: divisors.to_vec(),
            dense: false,
            output: output.to_vec(),
        };
        let all = |k: usize| (0..k).map(Layer).collect::<Vec<_>>();
        match self {
            ContextVariant::Ssh => chain(&[1, 2, 2], &[Layer(1), Layer(2)]),
            ContextVariant::Ssh2 => chain(&[4, 4, 4, 4], &all(4)),
            ContextVariant::Rssh => chain(&[2, 4, 4], &all(3)),
            ContextVariant::Rssh2 => chain(&[2, 4, 8, 8], &all(4)),
            ContextVariant::Retina => chain(&[2, 2, 2], &[Layer(0), Sum(1, 2)]),
            ContextVariant::Retina2 => chain(&[2, 2, 2], &[Layer(2), Sum(0, 1)]),
            ContextVariant::Dense => Topology {
                dense: true,
                ..chain(&[2, 4, 4], &all(3))
            },
            ContextVariant::Dense2 => Topology {
                dense: true,
                ..chain(&[2, 4, 8, 8], &all(4))
            },
            ContextVariant::Basic1 => chain(&[1], &[Layer(0)]),
            ContextVariant::Basic2 => chain(&[2, 2], &all(2)),
        }
    }
}

/// One entry of the output concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputPart {
    Layer(usize),
    /// Element-wise sum of two layers of equal width.
    Sum(usize, usize),
}

/// Wiring of a context module. Layer `i` has `n / divisors[i]` filters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub divisors: Vec<usize>,
    /// Dense wiring: layer `i` sees the module input concatenated with all
    /// earlier layer outputs. Otherwise each layer sees only its predecessor.
    pub dense: bool,
    pub output: Vec<OutputPart>,
}

impl Topology {
    pub fn widths(&self, n: usize) -> Vec<usize> {
        self.divisors.iter().map(|d| n / d).collect()
    }

    /// Input channels of every layer for a module input of `cin` channels.
    pub fn input_widths(&self, cin: usize, n: usize) -> Vec<usize> {
        let widths = self.widths(n);
        (0..widths.len())
            .map(|i| match (i, self.dense) {
                (0, _) => cin,
                (_, false) => widths[i - 1],
                (_, true) => cin + widths[..i].iter().sum::<usize>(),
            })
            .collect()
    }

    pub fn output_channels(&self, n: usize) -> usize {
        let w = self.widths(n);
        self.output
            .iter()
            .map(|p| match *p {
                OutputPart::Layer(i) => w[i],
                OutputPart::Sum(i, _) => w[i],
            })
            .sum()
    }

    fn validate(&self, n: usize) -> Result<()> {
        let w = self.widths(n);
        let ok = |i: usize| i < w.len();
        for p in &self.output {
            match *p {
                OutputPart::Layer(i) if !ok(i) => {
                    return Err(Error::Config(format!("context output refers to layer {i}")))
                }
                OutputPart::Sum(i, j) if !ok(i) || !ok(j) || w[i] != w[j] => {
                    return Err(Error::Config(format!(
                        "context sum of layers {i} and {j} needs two layers of equal width"
                    )))
                }
                _ => {}
            }
        }
        if self.divisors.iter().any(|&d| d == 0 || n % d != 0) {
            return Err(Error::Config(format!(
                "context filter count {n} is not divisible by the layer divisors"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextModuleSpec {
    pub variant: ContextVariant,
    /// Base filter count; also the output channel count.
    pub n: usize,
}

impl ContextModuleSpec {
    pub fn new(variant: ContextVariant, n: usize) -> Self {
        Self { variant, n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % CONTEXT_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "context filter count n = {} must be a positive multiple of {CONTEXT_DIVISOR}",
                self.n
            )));
        }
        self.variant.topology().validate(self.n)
    }
}

#[derive(Debug, Clone)]
pub struct ContextModule {
    topology: Topology,
    layers: Vec<ConvBlock>,
    out_act: Activation,
}

impl ContextModule {
    pub fn build<R: Rng>(
        name: &str,
        spec: &ContextModuleSpec,
        cin: usize,
        b: &mut Builder<'_, R>,
    ) -> Result<Self> {
        spec.validate()?;
        Self::with_topology(name, spec.variant.topology(), spec.n, cin, b)
    }

    /// Builds a module with custom wiring (alternative readings of a variant).
    pub fn with_topology<R: Rng>(
        name: &str,
        topology: Topology,
        n: usize,
        cin: usize,
        b: &mut Builder<'_, R>,
    ) -> Result<Self> {
        topology.validate(n)?;
        let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
        let layers = topology
            .input_widths(cin, n)
            .into_iter()
            .zip(topology.widths(n))
            .enumerate()
            .map(|(i, (ci, co))| {
                b.conv_block(&format!("{name}.conv{}", i + 1), ci, co, ConvOpts::new(3).act(leaky))
            })
            .collect();
        Ok(Self {
            topology,
            layers,
            out_act: leaky,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        buffers: &mut BufferStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let k = self.layers.len();
        // Linear (pre-activation) and activated output of each layer.
        let mut linear = Vec::with_capacity(k);
        let mut activated: Vec<NodeId> = Vec::with_capacity(k);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match (i, self.topology.dense) {
                (0, _) => x,
                (_, false) => activated[i - 1],
                (_, true) => {
                    let mut parts = vec![x];
                    parts.extend_from_slice(&activated);
                    graph.concat(&parts)?
                }
            };
            let z = layer.forward_linear(graph, params, buffers, input)?;
            linear.push(z);
            // the last layer's activation would never be consumed
            if i + 1 < k {
                activated.push(graph.activation(z, self.out_act));
            }
        }
        let mut parts = Vec::with_capacity(self.topology.output.len());
        for p in &self.topology.output {
            parts.push(match *p {
                OutputPart::Layer(i) => linear[i],
                OutputPart::Sum(i, j) => graph.add(linear[i], linear[j])?,
            });
        }
        let y = graph.concat(&parts)?;
        Ok(graph.activation(y, self.out_act))
    }
}
