use facedet_core::anchors::{AnchorLabel, MatchResult, PositiveMatch};
use facedet_core::geometry::LandmarkDeltas;
use facedet_core::loss::*;
use facedet_core::model::FlatHeads;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

/// Straight-line scalar transcription of the objective for a single image
/// where every anchor is mined.
fn reference_total(p: &FlatHeads, m: &MatchResult, l1: f64, l2: f64) -> f64 {
    fn sl1(x: f64) -> f64 {
        if x.abs() < 1.0 {
            0.5 * x * x
        } else {
            x.abs() - 0.5
        }
    }
    let mut cls = 0.0;
    let mut n_cls = 0.0;
    for (i, l) in m.labels.iter().enumerate() {
        let [b, f] = p.class[i];
        let pf = f.exp() / (f.exp() + b.exp());
        match l {
            AnchorLabel::Positive => cls -= pf.ln(),
            AnchorLabel::Negative => cls -= (1.0 - pf).ln(),
            AnchorLabel::Ignore => continue,
        }
        n_cls += 1.0;
    }
    let mut bx = 0.0;
    let mut lm = 0.0;
    for pos in &m.positives {
        for j in 0..4 {
            bx += sl1(p.boxes[pos.anchor][j] - pos.box_deltas[j]);
        }
        if let Some(t) = pos.landmark_deltas {
            for j in 0..10 {
                if t.valid[j / 2] {
                    lm += sl1(p.landmarks[pos.anchor][j] - t.deltas[j]);
                }
            }
        }
    }
    let n_reg = m.positives.len() as f64;
    cls / n_cls + (l1 * bx + l2 * lm) / n_reg
}

fn four_anchor_case(r: &mut impl Rng) -> (FlatHeads, MatchResult) {
    let mut p = FlatHeads::zeros(4);
    for i in 0..4 {
        p.class[i] = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        p.boxes[i] = core::array::from_fn(|_| r.gen_range(-2.0..2.0));
        p.landmarks[i] = core::array::from_fn(|_| r.gen_range(-2.0..2.0));
    }
    let m = MatchResult {
        labels: vec![
            AnchorLabel::Positive,
            AnchorLabel::Negative,
            AnchorLabel::Positive,
            AnchorLabel::Negative,
        ],
        max_iou: vec![0.7, 0.1, 0.55, 0.0],
        positives: vec![
            PositiveMatch {
                anchor: 0,
                gt: 0,
                box_deltas: [0.2, -0.1, 0.4, 1.7],
                landmark_deltas: Some(LandmarkDeltas {
                    deltas: [0.3, -0.2, 0.9, 0.1, -1.5, 0.4, 0.0, 0.7, 0.2, -0.6],
                    valid: [true; 5],
                }),
            },
            // a face without landmarks
            PositiveMatch {
                anchor: 2,
                gt: 1,
                box_deltas: [-0.5, 0.3, -2.2, 0.1],
                landmark_deltas: None,
            },
        ],
    };
    (p, m)
}

#[test]
fn four_anchor_example_matches_scalar_reference() {
    let mut r = SmallRng::seed_from_u64(3);
    for _ in 0..50 {
        let (p, m) = four_anchor_case(&mut r);
        let out = multitask_loss(&[p.clone()], &[m.clone()], &LossConfig::default()).unwrap();
        let expect = reference_total(&p, &m, 0.25, 0.1);
        assert!((out.breakdown.total - expect).abs() < 1e-6);
        assert_eq!(out.breakdown.n_cls, 4.0);
        assert_eq!(out.breakdown.n_reg, 2.0);
    }
}

#[test]
fn lambdas_scale_their_terms_only() {
    let mut r = SmallRng::seed_from_u64(5);
    let (p, m) = four_anchor_case(&mut r);
    let base = multitask_loss(&[p.clone()], &[m.clone()], &LossConfig::default()).unwrap();
    let cfg = LossConfig {
        lambda_box: 0.75,
        lambda_landmark: 0.5,
        ..LossConfig::default()
    };
    let scaled = multitask_loss(&[p], &[m], &cfg).unwrap();
    let (a, b) = (base.breakdown, scaled.breakdown);
    assert_eq!(a.cls, b.cls);
    assert_eq!(a.bbox, b.bbox);
    assert_eq!(a.landmark, b.landmark);
    let expect = a.cls / a.n_cls + (0.75 * a.bbox + 0.5 * a.landmark) / a.n_reg;
    assert!((b.total - expect).abs() < 1e-12);
    // the weighted regression parts scale by 3x and 5x
    let reg = |x: LossBreakdown, l1: f64, l2: f64| (l1 * x.bbox + l2 * x.landmark) / x.n_reg;
    assert!((reg(b, 0.75, 0.0) - 3.0 * reg(a, 0.25, 0.0)).abs() < 1e-12);
    assert!((reg(b, 0.0, 0.5) - 5.0 * reg(a, 0.0, 0.1)).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = SmallRng::seed_from_u64(9);
    let cfg = LossConfig::default();
    let (p, m) = four_anchor_case(&mut r);
    let out = multitask_loss(&[p.clone()], &[m.clone()], &cfg).unwrap();
    let g = &out.grads[0];
    let h = 1e-6;
    let f = |q: &FlatHeads| loss_value(&[q.clone()], &[m.clone()], &cfg).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.class[i][j] += h;
            b.class[i][j] -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - g.class[i][j]).abs() < 1e-6);
        }
        for j in 0..4 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.boxes[i][j] += h;
            b.boxes[i][j] -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - g.boxes[i][j]).abs() < 1e-6);
        }
        for j in 0..10 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.landmarks[i][j] += h;
            b.landmarks[i][j] -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - g.landmarks[i][j]).abs() < 1e-6);
        }
    }
}

#[test]
fn split_batch_with_global_normalizers_sums_to_full_batch() {
    let mut r = SmallRng::seed_from_u64(11);
    let cases: Vec<_> = (0..4).map(|_| four_anchor_case(&mut r)).collect();
    let (preds, matches): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
    let cfg = LossConfig::default();
    let full = multitask_loss(&preds, &matches, &cfg).unwrap();
    let global = Normalizers::combine(&[
        raw_normalizers(&matches[..2], &cfg.ohem),
        raw_normalizers(&matches[2..], &cfg.ohem),
    ]);
    let a = multitask_loss_with(&preds[..2], &matches[..2], &cfg, global).unwrap();
    let b = multitask_loss_with(&preds[2..], &matches[2..], &cfg, global).unwrap();
    assert!((a.breakdown.total + b.breakdown.total - full.breakdown.total).abs() < 1e-12);
    let parts: Vec<_> = a.grads.iter().chain(&b.grads).collect();
    for (x, y) in parts.iter().zip(&full.grads) {
        assert_eq!(**x, *y);
    }
}
