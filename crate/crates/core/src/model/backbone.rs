//! Feature extractors that feed the pyramid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{BufferStore, Builder, ConvBlock, ConvOpts, NormAct};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::tensor::Activation;

/// Backbone choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackboneSpec {
    /// Five stride-2 convolutions of the given base width; no pretrained
    /// weights required.
    TinyStub { width: usize },
    /// MobileNetV2 with width multiplier `alpha`.
    MobileNetV2 { alpha: f64 },
    /// Pre-activation ResNet with 50, 101 or 152 layers.
    ResNetV2 { depth: usize },
}

impl BackboneSpec {
    pub fn name(&self) -> alloc::string::String {
        match self {
            BackboneSpec::TinyStub { width } => format!("tiny-stub-{width}"),
            BackboneSpec::MobileNetV2 { alpha } => format!("mobilenet-v2-{alpha}"),
            BackboneSpec::ResNetV2 { depth } => format!("resnet-v2-{depth}"),
        }
    }
}

/// A backbone output used as a lateral input of the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
enum Unit {
    Plain(ConvBlock),
    /// MobileNetV2 inverted residual.
    Inverted {
        expand: Option<ConvBlock>,
        depthwise: ConvBlock,
        project: ConvBlock,
        residual: bool,
    },
    /// Pre-activation bottleneck: `x + F(relu(norm(x)))`, with the shortcut
    /// projected from the pre-activated input when the shape changes.
    Bottleneck {
        pre: NormAct,
        shortcut: Option<ConvBlock>,
        convs: [ConvBlock; 3],
    },
    MaxPool,
    /// Normalization + ReLU after the last pre-activation stage.
    PostNorm(NormAct),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    units: Vec<Unit>,
    /// `(unit index after which to tap, tap)`.
    taps: Vec<(usize, Tap)>,
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d) as usize * divisor;
    new_v = new_v.max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

impl Backbone {
    pub fn build<R: Rng>(spec: &BackboneSpec, b: &mut Builder<'_, R>) -> Result<Self> {
        match *spec {
            BackboneSpec::TinyStub { width } => {
                if width == 0 {
                    return Err(Error::Config("tiny-stub width must be positive".into()));
                }
                Ok(Self::tiny_stub(width, b))
            }
            BackboneSpec::MobileNetV2 { alpha } => {
                if !(alpha > 0.0) {
                    return Err(Error::Config("mobilenet alpha must be positive".into()));
                }
                Ok(Self::mobilenet_v2(alpha, b))
            }
            BackboneSpec::ResNetV2 { depth } => Self::resnet_v2(depth, b),
        }
    }

    fn tiny_stub<R: Rng>(c: usize, b: &mut Builder<'_, R>) -> Self {
        let relu = Activation::Relu;
        let widths = [(3, c), (c, c), (c, 2 * c), (2 * c, 2 * c), (2 * c, 2 * c)];
        let mut units = Vec::new();
        let mut taps = Vec::new();
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            let block = b.conv_block(
                &format!("backbone.stage{}", i + 1),
                cin,
                cout,
                ConvOpts::new(3).stride(2).act(relu),
            );
            units.push(Unit::Plain(block));
            if i >= 1 {
                taps.push((
                    units.len() - 1,
                    Tap {
                        stride: 2 << i,
                        channels: cout,
                    },
                ));
            }
        }
        Self { units, taps }
    }

    fn mobilenet_v2<R: Rng>(alpha: f64, b: &mut Builder<'_, R>) -> Self {
        let relu6 = Activation::Relu6;
        // (expansion, channels, repeats, stride)
        const SETTINGS: [(usize, usize, usize, usize); 7] = [
            (1, 16, 1, 1),
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        let mut units = Vec::new();
        let mut taps = Vec::new();
        let mut cin = make_divisible(32.0 * alpha, 8);
        units.push(Unit::Plain(b.conv_block(
            "backbone.stem",
            3,
            cin,
            ConvOpts::new(3).stride(2).act(relu6),
        )));
        let mut stride = 2;
        for (g, &(t, c, n, s)) in SETTINGS.iter().enumerate() {
            let cout = make_divisible(c as f64 * alpha, 8);
            for r in 0..n {
                let s = if r == 0 { s } else { 1 };
                let hidden = cin * t;
                let name = format!("backbone.block{g}.{r}");
                let expand = (t != 1).then(|| {
                    b.conv_block(&format!("{name}.expand"), cin, hidden, ConvOpts::new(1).act(relu6))
                });
                let depthwise = b.conv_block(
                    &format!("{name}.depthwise"),
                    hidden,
                    hidden,
                    ConvOpts::new(3).stride(s).groups(hidden).act(relu6),
                );
                let project = b.conv_block(&format!("{name}.project"), hidden, cout, ConvOpts::new(1));
                units.push(Unit::Inverted {
                    expand,
                    depthwise,
                    project,
                    residual: s == 1 && cin == cout,
                });
                stride *= s;
                cin = cout;
            }
            // tap the last block before each stride change, and the final block
            let next_stride = SETTINGS.get(g + 1).map_or(2, |x| x.3);
            if stride >= 4 && (next_stride == 2) {
                taps.push((
                    units.len() - 1,
                    Tap {
                        stride,
                        channels: cin,
                    },
                ));
            }
        }
        Self { units, taps }
    }

    fn resnet_v2<R: Rng>(depth: usize, b: &mut Builder<'_, R>) -> Result<Self> {
        let blocks: [usize; 4] = match depth {
            50 => [3, 4, 6, 3],
            101 => [3, 4, 23, 3],
            152 => [3, 8, 36, 3],
            _ => {
                return Err(Error::Config(format!(
                    "unsupported resnet-v2 depth {depth} (50, 101, 152)"
                )))
            }
        };
        let relu = Activation::Relu;
        let mut units = Vec::new();
        let mut taps = Vec::new();
        units.push(Unit::Plain(b.conv_block(
            "backbone.stem",
            3,
            64,
            ConvOpts::new(7).stride(2).act(relu),
        )));
        units.push(Unit::MaxPool);
        let mut cin = 64;
        let mut stride = 4;
        for (stage, &n) in blocks.iter().enumerate() {
            let width = 64 << stage;
            let cout = 4 * width;
            for r in 0..n {
                let s = if r == 0 && stage > 0 { 2 } else { 1 };
                let name = format!("backbone.stage{}.unit{r}", stage + 1);
                let pre = b.norm_act(&format!("{name}.pre"), cin, relu);
                let shortcut = (s != 1 || cin != cout).then(|| {
                    b.conv_block(
                        &format!("{name}.shortcut"),
                        cin,
                        cout,
                        ConvOpts::new(1).stride(s).linear(),
                    )
                });
                let convs = [
                    b.conv_block(&format!("{name}.conv1"), cin, width, ConvOpts::new(1).act(relu)),
                    b.conv_block(
                        &format!("{name}.conv2"),
                        width,
                        width,
                        ConvOpts::new(3).stride(s).act(relu),
                    ),
                    b.conv_block(&format!("{name}.conv3"), width, cout, ConvOpts::new(1).linear()),
                ];
                units.push(Unit::Bottleneck {
                    pre,
                    shortcut,
                    convs,
                });
                stride *= s;
                cin = cout;
            }
            if stage == blocks.len() - 1 {
                units.push(Unit::PostNorm(b.norm_act("backbone.post", cin, relu)));
            }
            taps.push((
                units.len() - 1,
                Tap {
                    stride,
                    channels: cin,
                },
            ));
        }
        Ok(Self { units, taps })
    }

    pub fn taps(&self) -> Vec<Tap> {
        self.taps.iter().map(|t| t.1).collect()
    }

    /// Runs the backbone; returns one node per tap, in tap order.
    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        buffers: &mut BufferStore,
        x: NodeId,
    ) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.taps.len());
        let mut h = x;
        let mut next_tap = 0;
        for (i, unit) in self.units.iter().enumerate() {
            h = match unit {
                Unit::Plain(block) => block.forward(graph, params, buffers, h)?,
                Unit::Inverted {
                    expand,
                    depthwise,
                    project,
                    residual,
                } => {
                    let mut y = h;
                    if let Some(e) = expand {
                        y = e.forward(graph, params, buffers, y)?;
                    }
                    y = depthwise.forward(graph, params, buffers, y)?;
                    y = project.forward(graph, params, buffers, y)?;
                    if *residual {
                        graph.add(y, h)?
                    } else {
                        y
                    }
                }
                Unit::Bottleneck {
                    pre,
                    shortcut,
                    convs,
                } => {
                    let p = pre.forward(graph, params, buffers, h)?;
                    let short = match shortcut {
                        Some(s) => s.forward(graph, params, buffers, p)?,
                        None => h,
                    };
                    let mut y = p;
                    for c in convs {
                        y = c.forward(graph, params, buffers, y)?;
                    }
                    graph.add(y, short)?
                }
                Unit::MaxPool => graph.max_pool(h),
                Unit::PostNorm(na) => na.forward(graph, params, buffers, h)?,
            };
            while next_tap < self.taps.len() && self.taps[next_tap].0 == i {
                out.push(h);
                next_tap += 1;
            }
        }
        Ok(out)
    }
}
