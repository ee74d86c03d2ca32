use facedet_core::anchors::{build_anchors, AnchorIndex, PyramidLevel, PyramidSpec};
use facedet_core::graph::{Gradients, Graph, ParamStore};
use facedet_core::model::*;
use facedet_core::tensor::Tensor;
use facedet_core::Error;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

fn rng() -> SmallRng {
    SmallRng::seed_from_u64(7)
}

fn small_spec(variant: ContextVariant) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec::TinyStub { width: 4 },
        ..ModelSpec::tiny(variant, 8)
    }
}

fn random_tensor(shape: [usize; 4], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn level_sizes_follow_strides_with_ceiling() {
    let mut r = rng();
    let mut det = Detector::new(small_spec(ContextVariant::Ssh), &mut r).unwrap();
    let out = det.predict(&Tensor::zeros([1, 3, 640, 640])).unwrap();
    let sizes: Vec<_> = out.level_shapes();
    assert_eq!(sizes, [160, 80, 40, 20, 10, 5].map(|s| (s, s)).to_vec());
    let out = det.predict(&Tensor::zeros([1, 3, 320, 320])).unwrap();
    assert_eq!(out.level_shapes(), [80, 40, 20, 10, 5, 3].map(|s| (s, s)).to_vec());
    let out = det.predict(&Tensor::zeros([1, 3, 100, 37])).unwrap();
    let expect: Vec<_> = [4, 8, 16, 32, 64, 128]
        .iter()
        .map(|s: &usize| (100usize.div_ceil(*s), 37usize.div_ceil(*s)))
        .collect();
    assert_eq!(out.level_shapes(), expect);
}

#[test]
fn zero_input_gives_finite_outputs() {
    let mut det = Detector::new(small_spec(ContextVariant::Dense2), &mut rng()).unwrap();
    let mut g = Graph::new(true);
    let nodes = det.forward(&mut g, &Tensor::zeros([2, 3, 64, 64])).unwrap();
    let out = nodes.output(&g, 3);
    for t in out.class.iter().chain(&out.boxes).chain(&out.landmarks) {
        assert!(t.all_finite());
    }
}

#[test]
fn head_shapes_and_anchor_total_at_640() {
    let mut det = Detector::new(small_spec(ContextVariant::Basic1), &mut rng()).unwrap();
    let out = det.predict(&Tensor::zeros([2, 3, 640, 640])).unwrap();
    assert_eq!(out.class_shape_nhwc(0), [2, 160, 160, 6]);
    for l in 0..6 {
        assert_eq!(out.class[l].channels(), 6);
        assert_eq!(out.boxes[l].channels(), 12);
        assert_eq!(out.landmarks[l].channels(), 30);
    }
    let grid = build_anchors(&PyramidSpec::default(), 640, 640).unwrap();
    assert_eq!(out.num_anchors(), 102_375);
    assert_eq!(out.num_anchors(), grid.len());
    assert_eq!(out.flatten(1).len(), grid.len());
}

#[test]
fn heads_align_with_anchor_grid() {
    let mut det = Detector::new(small_spec(ContextVariant::Rssh), &mut rng()).unwrap();
    let (w, h) = (96, 72);
    let mut out = det.predict(&Tensor::zeros([2, 3, h, w])).unwrap();
    let grid = build_anchors(&det.spec().pyramid, w, h).unwrap();
    assert_eq!(grid.level_shapes, out.level_shapes());
    // tag every channel with its (level, row, col, channel) and read it back
    // through the flattened anchor order
    let tag = |l: usize, r: usize, c: usize, ch: usize| (((l * 100 + r) * 100 + c) * 100 + ch) as f64;
    for l in 0..out.num_levels() {
        for (t, _) in [(&mut out.class[l], 2), (&mut out.boxes[l], 4), (&mut out.landmarks[l], 10)] {
            let [_, chans, rows, cols] = t.shape();
            for ch in 0..chans {
                for r in 0..rows {
                    for c in 0..cols {
                        *t.at_mut(1, ch, r, c) = tag(l, r, c, ch);
                    }
                }
            }
        }
    }
    let flat = out.flatten(1);
    for i in 0..grid.len() {
        let AnchorIndex { level, row, col, scale } = grid.index_of(i);
        assert_eq!(grid.flat_index(grid.index_of(i)), i);
        assert_eq!(flat.class[i][1], tag(level, row, col, scale * 2 + 1));
        assert_eq!(flat.boxes[i][3], tag(level, row, col, scale * 4 + 3));
        assert_eq!(flat.landmarks[i][7], tag(level, row, col, scale * 10 + 7));
        // the anchor sits on the cell the prediction comes from
        let s = det.spec().pyramid.levels[level].stride as f64;
        let centre = grid.boxes[i].center();
        assert!((centre.x - (col as f64 + 0.5) * s).abs() < 1e-9);
        assert!((centre.y - (row as f64 + 0.5) * s).abs() < 1e-9);
    }
    let mut back = out.zeros_like();
    back.set_flat(1, &flat).unwrap();
    assert_eq!(back.flatten(1), flat);
    assert!(back.set_flat(0, &FlatHeads::zeros(3)).is_err());
}

#[test]
fn non_rgb_input_is_a_shape_error() {
    let mut det = Detector::new(small_spec(ContextVariant::Ssh), &mut rng()).unwrap();
    assert!(matches!(det.predict(&Tensor::zeros([1, 1, 32, 32])), Err(Error::Shape(_))));
    assert!(matches!(det.predict(&Tensor::zeros([1, 4, 32, 32])), Err(Error::Shape(_))));
}

#[test]
fn tap_stride_mismatch_is_a_config_error() {
    let mut spec = small_spec(ContextVariant::Ssh);
    // the stub's finest tap is stride 4; a stride-2 level has no lateral
    spec.pyramid.levels.insert(0, PyramidLevel { stride: 2, scale: 8.0 });
    assert!(matches!(Detector::new(spec, &mut rng()), Err(Error::Config(_))));
    let mut spec = small_spec(ContextVariant::Ssh);
    spec.pyramid.levels.truncate(4);
    spec.pyramid.levels.drain(..1);
    spec.pyramid.levels.iter_mut().for_each(|l| l.stride *= 64);
    assert!(matches!(Detector::new(spec, &mut rng()), Err(Error::Config(_))));
}

#[test]
fn context_filter_count_must_divide_by_eight() {
    for v in ContextVariant::ALL {
        assert!(ContextModuleSpec::new(v, 64).validate().is_ok());
        for n in [0, 12, 20, 36] {
            assert!(matches!(ContextModuleSpec::new(v, n).validate(), Err(Error::Config(_))));
        }
        assert!(Detector::new(ModelSpec::tiny(v, 12), &mut rng()).is_err());
    }
}

fn standalone_context(
    variant: ContextVariant,
    n: usize,
    cin: usize,
    norm: NormKind,
) -> (ContextModule, ParamStore, BufferStore) {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::default();
    let mut r = rng();
    let mut b = Builder {
        params: &mut params,
        buffers: &mut buffers,
        rng: &mut r,
        norm,
    };
    let m = ContextModule::build("ctx", &ContextModuleSpec::new(variant, n), cin, &mut b).unwrap();
    (m, params, buffers)
}

#[test]
fn every_variant_preserves_shape() {
    let mut r = rng();
    let x = random_tensor([1, 64, 20, 20], &mut r);
    for v in ContextVariant::ALL {
        let (m, params, mut buffers) = standalone_context(v, 64, 64, NormKind::Batch);
        let mut g = Graph::new(true);
        let xi = g.input(x.clone());
        let y = m.forward(&mut g, &params, &mut buffers, xi).unwrap();
        assert_eq!(g.value(y).shape(), [1, 64, 20, 20], "{}", v.name());
        assert_eq!(v.topology().output_channels(64), 64);
    }
}

#[test]
fn basic1_with_identity_kernel_is_identity() {
    let (m, mut params, mut buffers) = standalone_context(ContextVariant::Basic1, 16, 16, NormKind::None);
    let w = params.find("ctx.conv1.weight").unwrap();
    let shape = params.value(w).shape();
    let mut k = Tensor::zeros(shape);
    for o in 0..16 {
        *k.at_mut(o, o, 1, 1) = 1.0;
    }
    *params.value_mut(w) = k;
    let mut r = rng();
    // non-negative features, as produced by the preceding rectified layers
    let mut x = random_tensor([2, 16, 9, 11], &mut r);
    x.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let mut g = Graph::new(false);
    let xi = g.input(x.clone());
    let y = m.forward(&mut g, &params, &mut buffers, xi).unwrap();
    assert_eq!(g.value(y), &x);
}

/// Weights + per-channel extras of a 3x3 convolution.
fn conv3_params(cin: usize, cout: usize, norm: NormKind) -> usize {
    cin * cout * 9 + if norm == NormKind::Batch { 2 * cout } else { cout }
}

#[test]
fn context_parameter_counts_match_closed_form() {
    let n = 64;
    let cin = 64;
    let expected = |v: ContextVariant, norm: NormKind| -> usize {
        let c = |a, b| conv3_params(a, b, norm);
        match v {
            ContextVariant::Ssh => c(cin, n) + c(n, n / 2) + c(n / 2, n / 2),
            ContextVariant::Ssh2 => c(cin, n / 4) + 3 * c(n / 4, n / 4),
            ContextVariant::Rssh => c(cin, n / 2) + c(n / 2, n / 4) + c(n / 4, n / 4),
            ContextVariant::Rssh2 => {
                c(cin, n / 2) + c(n / 2, n / 4) + c(n / 4, n / 8) + c(n / 8, n / 8)
            }
            ContextVariant::Retina | ContextVariant::Retina2 => c(cin, n / 2) + 2 * c(n / 2, n / 2),
            ContextVariant::Dense => {
                c(cin, n / 2) + c(cin + n / 2, n / 4) + c(cin + n / 2 + n / 4, n / 4)
            }
            ContextVariant::Dense2 => {
                c(cin, n / 2)
                    + c(cin + n / 2, n / 4)
                    + c(cin + n / 2 + n / 4, n / 8)
                    + c(cin + n / 2 + n / 4 + n / 8, n / 8)
            }
            ContextVariant::Basic1 => c(cin, n),
            ContextVariant::Basic2 => c(cin, n / 2) + c(n / 2, n / 2),
        }
    };
    for norm in [NormKind::None, NormKind::Batch] {
        for v in ContextVariant::ALL {
            let (_, params, _) = standalone_context(v, n, cin, norm);
            assert_eq!(params.num_scalars(), expected(v, norm), "{} {norm:?}", v.name());
        }
    }
    let (_, params, _) = standalone_context(ContextVariant::Basic1, 64, 64, NormKind::None);
    assert_eq!(params.num_scalars(), 36_928);
}

#[test]
fn variants_are_interchangeable_in_the_detector() {
    let mut r = rng();
    let x = random_tensor([1, 3, 48, 40], &mut r);
    let mut shapes = None;
    for v in ContextVariant::ALL {
        let mut det = Detector::new(small_spec(v), &mut r).unwrap();
        let out = det.predict(&x).unwrap();
        let s: Vec<_> = out
            .class
            .iter()
            .chain(&out.boxes)
            .chain(&out.landmarks)
            .map(|t| t.shape())
            .collect();
        match &shapes {
            None => shapes = Some(s),
            Some(prev) => assert_eq!(prev, &s, "{}", v.name()),
        }
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    for norm in [NormKind::Batch, NormKind::None] {
        let mut r = rng();
        let spec = ModelSpec {
            norm,
            ..small_spec(ContextVariant::Retina)
        };
        let mut det = Detector::new(spec, &mut r).unwrap();
        let x = random_tensor([2, 3, 64, 64], &mut r);
        let mut g = Graph::new(true);
        let nodes = det.forward(&mut g, &x).unwrap();
        let out = nodes.output(&g, 3);
        let mut seed = out.zeros_like();
        for t in seed.class.iter_mut().chain(&mut seed.boxes).chain(&mut seed.landmarks) {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
        let mut grads = Gradients::zeros_like(det.params());
        g.backward(det.params(), nodes.seeds(seed), &mut grads).unwrap();
        for (id, p) in det.params().iter() {
            assert!(
                grads.get(id).data().iter().any(|v| *v != 0.0),
                "no gradient for {} ({norm:?})",
                p.name
            );
        }
    }
}

#[test]
fn backbone_taps_have_increasing_strides() {
    for spec in [
        BackboneSpec::TinyStub { width: 4 },
        BackboneSpec::MobileNetV2 { alpha: 0.25 },
        BackboneSpec::ResNetV2 { depth: 50 },
    ] {
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::default();
        let mut r = rng();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut r,
            norm: NormKind::Batch,
        };
        let bb = Backbone::build(&spec, &mut b).unwrap();
        let strides: Vec<_> = bb.taps().iter().map(|t| t.stride).collect();
        assert_eq!(strides, [4, 8, 16, 32], "{}", spec.name());
    }
}

#[test]
fn mobilenet_v2_feature_sizes() {
    let spec = ModelSpec {
        backbone: BackboneSpec::MobileNetV2 { alpha: 0.25 },
        ..ModelSpec::tiny(ContextVariant::Ssh, 16)
    };
    let mut det = Detector::new(spec, &mut rng()).unwrap();
    let out = det.predict(&Tensor::zeros([1, 3, 70, 70])).unwrap();
    assert_eq!(out.level_shapes(), [18, 9, 5, 3, 2, 1].map(|s| (s, s)).to_vec());
}

#[test]
fn parameter_counts_of_components_add_up() {
    let det = Detector::new(small_spec(ContextVariant::Dense), &mut rng()).unwrap();
    let parts: usize = ["backbone", "fpn", "context", "post", "head"]
        .iter()
        .map(|p| det.num_parameters_in(p))
        .sum();
    assert_eq!(parts, det.num_parameters());
    // shared heads: 1x1 convs with bias from n = 8 channels, k = 3
    assert_eq!(det.num_parameters_in("head"), (8 + 1) * (6 + 12 + 30));
}
