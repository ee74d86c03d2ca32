//! The detector: backbone, feature pyramid, per-level context modules and
//! shared prediction heads.

mod backbone;
mod context;
mod layers;

pub use backbone::{Backbone, BackboneSpec, Tap};
pub use context::{
    ContextModule, ContextModuleSpec, ContextVariant, OutputPart, Topology, CONTEXT_DIVISOR,
    LEAKY_SLOPE,
};
pub use layers::{
    BufferId, BufferStore, Builder, Conv, ConvBlock, ConvOpts, Init, Norm, NormAct, NormKind,
};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::anchors::PyramidSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::tensor::{Activation, Tensor};

/// What follows each context module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostContext {
    /// A standard 3x3 convolution standing in for a modulated deformable
    /// convolution.
    Conv3x3,
    None,
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub pyramid: PyramidSpec,
    /// Context variant and base filter count `n`; `n` is also the pyramid
    /// width.
    pub context: ContextModuleSpec,
    pub norm: NormKind,
    pub post_context: PostContext,
}

impl ModelSpec {
    /// Small CPU-friendly configuration.
    pub fn tiny(variant: ContextVariant, n: usize) -> Self {
        Self {
            backbone: BackboneSpec::TinyStub { width: 8 },
            pyramid: PyramidSpec::default(),
            context: ContextModuleSpec::new(variant, n),
            norm: NormKind::Batch,
            post_context: PostContext::Conv3x3,
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.pyramid.anchors_per_cell()
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.context.validate()
    }
}

/// Top-down feature pyramid with stride-2 extra levels.
#[derive(Debug, Clone)]
struct Fpn {
    /// Backbone tap feeding each lateral level, finest first.
    tap_index: Vec<usize>,
    laterals: Vec<ConvBlock>,
    /// 3x3 smoothing after the top-down merge (all lateral levels but the
    /// deepest).
    merges: Vec<ConvBlock>,
    extras: Vec<ConvBlock>,
}

impl Fpn {
    fn build<R: Rng>(
        taps: &[Tap],
        pyramid: &PyramidSpec,
        n: usize,
        b: &mut Builder<'_, R>,
    ) -> Result<Self> {
        if taps.windows(2).any(|w| w[1].stride <= w[0].stride) {
            return Err(Error::Config("backbone taps must have strictly increasing strides".into()));
        }
        let deepest = taps.last().map_or(0, |t| t.stride);
        let strides = pyramid.strides();
        let mut tap_index = Vec::new();
        for &s in &strides {
            if s > deepest {
                break;
            }
            match taps.iter().position(|t| t.stride == s) {
                Some(i) => tap_index.push(i),
                None => {
                    return Err(Error::Config(format!(
                        "pyramid stride {s} has no backbone tap (taps: {:?})",
                        taps.iter().map(|t| t.stride).collect::<Vec<_>>()
                    )))
                }
            }
        }
        if tap_index.is_empty() {
            return Err(Error::Config(format!(
                "the finest pyramid stride {} is coarser than every backbone tap",
                strides[0]
            )));
        }
        let leaky = Activation::LeakyRelu(context::LEAKY_SLOPE);
        let laterals = tap_index
            .iter()
            .enumerate()
            .map(|(l, &t)| {
                b.conv_block(
                    &format!("fpn.lateral{l}"),
                    taps[t].channels,
                    n,
                    ConvOpts::new(1).act(leaky),
                )
            })
            .collect();
        let merges = (0..tap_index.len() - 1)
            .map(|l| b.conv_block(&format!("fpn.merge{l}"), n, n, ConvOpts::new(3).act(leaky)))
            .collect();
        let extras = (tap_index.len()..strides.len())
            .map(|l| {
                b.conv_block(
                    &format!("fpn.extra{l}"),
                    n,
                    n,
                    ConvOpts::new(3).stride(2).act(leaky),
                )
            })
            .collect();
        Ok(Self {
            tap_index,
            laterals,
            merges,
            extras,
        })
    }

    fn forward(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        buffers: &mut BufferStore,
        features: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let lat: Vec<NodeId> = self
            .tap_index
            .iter()
            .zip(&self.laterals)
            .map(|(&t, block)| block.forward(graph, params, buffers, features[t]))
            .collect::<Result<_>>()?;
        let k = lat.len();
        let mut out = lat.clone();
        for l in (0..k - 1).rev() {
            let [_, _, h, w] = graph.value(lat[l]).shape();
            let up = graph.upsample2x(out[l + 1], h, w)?;
            let sum = graph.add(lat[l], up)?;
            out[l] = self.merges[l].forward(graph, params, buffers, sum)?;
        }
        for block in &self.extras {
            let prev = *out.last().expect("non-empty pyramid");
            out.push(block.forward(graph, params, buffers, prev)?);
        }
        Ok(out)
    }
}

/// 1x1 prediction convolutions shared by all pyramid levels.
#[derive(Debug, Clone)]
struct Heads {
    class: ConvBlock,
    boxes: ConvBlock,
    landmarks: ConvBlock,
}

/// Prior face probability used to initialize the class bias.
const CLASS_PRIOR: f64 = 0.01;

impl Heads {
    fn build<R: Rng>(n: usize, k: usize, b: &mut Builder<'_, R>) -> Self {
        let init = Init::Uniform(1.0 / libm::sqrt(n as f64));
        let mut head = |name: &str, c: usize| {
            b.conv_block(&format!("head.{name}"), n, c * k, ConvOpts::new(1).init(init).plain())
        };
        let class = head("class", 2);
        let boxes = head("box", 4);
        let landmarks = head("landmark", 10);
        // start from a low face probability so the initial loss is not
        // dominated by the many easy negatives
        let bias = class.conv.bias.expect("plain conv has a bias");
        let logit = libm::log(CLASS_PRIOR / (1.0 - CLASS_PRIOR));
        for m in 0..k {
            *b.params.value_mut(bias).at_mut(0, 2 * m + 1, 0, 0) = logit;
        }
        Self {
            class,
            boxes,
            landmarks,
        }
    }
}

/// Head nodes per pyramid level inside a recorded graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNodes {
    pub class: Vec<NodeId>,
    pub boxes: Vec<NodeId>,
    pub landmarks: Vec<NodeId>,
}

impl HeadNodes {
    pub fn output(&self, graph: &Graph, anchors_per_cell: usize) -> HeadOutput {
        let get = |ids: &[NodeId]| ids.iter().map(|&i| graph.value(i).clone()).collect();
        HeadOutput {
            class: get(&self.class),
            boxes: get(&self.boxes),
            landmarks: get(&self.landmarks),
            anchors_per_cell,
        }
    }

    /// Seeds for [`Graph::backward`] from gradients shaped like the outputs.
    pub fn seeds(&self, grads: HeadOutput) -> Vec<(NodeId, Tensor)> {
        self.class
            .iter()
            .copied()
            .zip(grads.class)
            .chain(self.boxes.iter().copied().zip(grads.boxes))
            .chain(self.landmarks.iter().copied().zip(grads.landmarks))
            .collect()
    }
}

/// Per-anchor predictions of one image, flattened in anchor-grid order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatHeads {
    pub class: Vec<[f64; 2]>,
    pub boxes: Vec<[f64; 4]>,
    pub landmarks: Vec<[f64; 10]>,
}

impl FlatHeads {
    pub fn zeros(anchors: usize) -> Self {
        Self {
            class: alloc::vec![[0.0; 2]; anchors],
            boxes: alloc::vec![[0.0; 4]; anchors],
            landmarks: alloc::vec![[0.0; 10]; anchors],
        }
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }
}

/// Head tensors per level, NCHW. Channel `m * C + c` of a level holds
/// component `c` of the anchor with scale multiplier `m`, where `C` is 2, 4
/// or 10.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub class: Vec<Tensor>,
    pub boxes: Vec<Tensor>,
    pub landmarks: Vec<Tensor>,
    pub anchors_per_cell: usize,
}

impl HeadOutput {
    /// Zero tensors with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |ts: &[Tensor]| ts.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            class: z(&self.class),
            boxes: z(&self.boxes),
            landmarks: z(&self.landmarks),
            anchors_per_cell: self.anchors_per_cell,
        }
    }

    pub fn batch(&self) -> usize {
        self.class.first().map_or(0, |t| t.batch())
    }

    pub fn num_levels(&self) -> usize {
        self.class.len()
    }

    /// `(rows, cols)` per level.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.class.iter().map(|t| (t.height(), t.width())).collect()
    }

    pub fn num_anchors(&self) -> usize {
        self.level_shapes().iter().map(|(h, w)| h * w).sum::<usize>() * self.anchors_per_cell
    }

    /// Class-logit shape of a level in `(batch, rows, cols, 2k)` order.
    pub fn class_shape_nhwc(&self, level: usize) -> [usize; 4] {
        let [b, c, h, w] = self.class[level].shape();
        [b, h, w, c]
    }

    fn walk(&self, f: impl FnMut(usize, usize, usize, usize, usize)) {
        walk_anchors(&self.level_shapes(), self.anchors_per_cell, f)
    }

    /// Predictions of image `n` in anchor-grid order.
    pub fn flatten(&self, n: usize) -> FlatHeads {
        let mut out = FlatHeads::zeros(self.num_anchors());
        self.walk(|l, r, c, m, i| {
            for j in 0..2 {
                out.class[i][j] = self.class[l].at(n, m * 2 + j, r, c);
            }
            for j in 0..4 {
                out.boxes[i][j] = self.boxes[l].at(n, m * 4 + j, r, c);
            }
            for j in 0..10 {
                out.landmarks[i][j] = self.landmarks[l].at(n, m * 10 + j, r, c);
            }
        });
        out
    }

    /// Inverse of [`HeadOutput::flatten`]: writes image `n`.
    pub fn set_flat(&mut self, n: usize, flat: &FlatHeads) -> Result<()> {
        if flat.len() != self.num_anchors() {
            return Err(Error::Shape(format!(
                "{} flattened anchors for a head output with {}",
                flat.len(),
                self.num_anchors()
            )));
        }
        let shapes = self.level_shapes();
        let (heads, boxes, lmks) = (&mut self.class, &mut self.boxes, &mut self.landmarks);
        walk_anchors(&shapes, self.anchors_per_cell, |l, r, c, m, i| {
            for j in 0..2 {
                *heads[l].at_mut(n, m * 2 + j, r, c) = flat.class[i][j];
            }
            for j in 0..4 {
                *boxes[l].at_mut(n, m * 4 + j, r, c) = flat.boxes[i][j];
            }
            for j in 0..10 {
                *lmks[l].at_mut(n, m * 10 + j, r, c) = flat.landmarks[i][j];
            }
        });
        Ok(())
    }
}

/// Calls `f(level, row, col, multiplier, flat_index)` in anchor-grid order.
fn walk_anchors(
    shapes: &[(usize, usize)],
    k: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let mut flat = 0;
    for (l, &(rows, cols)) in shapes.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                for m in 0..k {
                    f(l, r, c, m, flat);
                    flat += 1;
                }
            }
        }
    }
}

/// A complete detector with its parameters and normalization buffers.
#[derive(Debug, Clone)]
pub struct Detector {
    spec: ModelSpec,
    params: ParamStore,
    buffers: BufferStore,
    backbone: Backbone,
    fpn: Fpn,
    contexts: Vec<ContextModule>,
    post: Vec<Option<ConvBlock>>,
    heads: Heads,
}

impl Detector {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::default();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng,
            norm: spec.norm,
        };
        let n = spec.context.n;
        let backbone = Backbone::build(&spec.backbone, &mut b)?;
        let fpn = Fpn::build(&backbone.taps(), &spec.pyramid, n, &mut b)?;
        let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
        let levels = spec.pyramid.levels.len();
        let mut contexts = Vec::with_capacity(levels);
        let mut post = Vec::with_capacity(levels);
        for l in 0..levels {
            contexts.push(ContextModule::build(&format!("context{l}"), &spec.context, n, &mut b)?);
            post.push(match spec.post_context {
                PostContext::Conv3x3 => Some(b.conv_block(
                    &format!("post{l}"),
                    n,
                    n,
                    ConvOpts::new(3).act(leaky),
                )),
                PostContext::None => None,
            });
        }
        let heads = Heads::build(n, spec.anchors_per_cell(), &mut b);
        Ok(Self {
            spec,
            params,
            buffers,
            backbone,
            fpn,
            contexts,
            post,
            heads,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &BufferStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BufferStore {
        &mut self.buffers
    }

    /// Exact number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Trainable scalars whose parameter name starts with `prefix`
    /// (`backbone`, `fpn`, `context`, `post`, `head`).
    pub fn num_parameters_in(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Records the forward pass of an NCHW RGB batch.
    pub fn forward(&mut self, graph: &mut Graph, images: &Tensor) -> Result<HeadNodes> {
        if images.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel image batch, got {} channels",
                images.channels()
            )));
        }
        if images.batch() == 0 || images.height() == 0 || images.width() == 0 {
            return Err(Error::Shape("empty image batch".into()));
        }
        let params = &self.params;
        let buffers = &mut self.buffers;
        let x = graph.input(images.clone());
        let features = self.backbone.forward(graph, params, buffers, x)?;
        let pyramid = self.fpn.forward(graph, params, buffers, &features)?;
        let mut nodes = HeadNodes {
            class: Vec::new(),
            boxes: Vec::new(),
            landmarks: Vec::new(),
        };
        for (l, &p) in pyramid.iter().enumerate() {
            let mut h = self.contexts[l].forward(graph, params, buffers, p)?;
            if let Some(block) = &self.post[l] {
                h = block.forward(graph, params, buffers, h)?;
            }
            nodes.class.push(self.heads.class.forward(graph, params, buffers, h)?);
            nodes.boxes.push(self.heads.boxes.forward(graph, params, buffers, h)?);
            nodes.landmarks.push(self.heads.landmarks.forward(graph, params, buffers, h)?);
        }
        Ok(nodes)
    }

    /// Inference-mode forward pass (running normalization statistics).
    pub fn predict(&mut self, images: &Tensor) -> Result<HeadOutput> {
        let mut graph = Graph::new(false);
        let nodes = self.forward(&mut graph, images)?;
        Ok(nodes.output(&graph, self.spec.anchors_per_cell()))
    }

    /// Short human-readable description recorded alongside checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "backbone={} context={} n={} norm={:?} post_context={}",
            self.spec.backbone.name(),
            self.spec.context.variant.name(),
            self.spec.context.n,
            self.spec.norm,
            match self.spec.post_context {
                PostContext::Conv3x3 => "conv3x3 (deformable conv not used)",
                PostContext::None => "none",
            }
        )
    }
}
