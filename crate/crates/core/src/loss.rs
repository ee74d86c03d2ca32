//! Multi-task detection loss with online hard example mining.
//!
//! ```text
//! L = L_cls / N_cls + (λ_box · L_box + λ_lmk · L_lmk) / N_reg
//! ```
//!
//! `L_cls` is summed over the mined anchors (all positives plus the hardest
//! negatives), the regression terms over positives only. `N_cls` counts the
//! mined anchors and `N_reg` the positives of the batch, both floored at one.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::anchors::{AnchorLabel, MatchResult};
use crate::error::{Error, Result};
use crate::geometry::NUM_LANDMARKS;
use crate::model::FlatHeads;

/// Classification term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassLoss {
    /// Two-class softmax cross entropy.
    CrossEntropy,
    /// `-w_t (1 - p_t)^gamma ln p_t` with class weights `w_t`.
    Focal {
        gamma: f64,
        weight_pos: f64,
        weight_neg: f64,
    },
}

/// Whether the negative quota is enforced per image or over the whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OhemScope {
    PerImage,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    /// Negatives kept per positive.
    pub neg_pos_ratio: usize,
    /// Negatives kept when there are no positives.
    pub min_negatives: usize,
    pub scope: OhemScope,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            neg_pos_ratio: 3,
            min_negatives: 16,
            scope: OhemScope::PerImage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_box: f64,
    pub lambda_landmark: f64,
    /// Transition point of the smooth-L1 penalty, in encoded units.
    pub smooth_l1_beta: f64,
    pub class_loss: ClassLoss,
    pub ohem: OhemConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_box: 0.25,
            lambda_landmark: 0.1,
            smooth_l1_beta: 1.0,
            class_loss: ClassLoss::CrossEntropy,
            ohem: OhemConfig::default(),
        }
    }
}

/// Loss terms of one batch and the counts that normalized them.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Summed classification loss over mined anchors.
    pub cls: f64,
    /// Summed box regression loss over positives.
    pub bbox: f64,
    /// Summed landmark regression loss over valid landmark coordinates.
    pub landmark: f64,
    pub total: f64,
    pub n_cls: f64,
    pub n_reg: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Normalizing counts. Computed from the labels alone, so they can be
/// gathered across devices before any loss is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub n_cls: f64,
    pub n_reg: f64,
}

impl Normalizers {
    /// Sum of per-device raw counts, then floored at one.
    pub fn combine(parts: &[Normalizers]) -> Self {
        Self {
            n_cls: parts.iter().map(|p| p.n_cls).sum::<f64>().max(1.0),
            n_reg: parts.iter().map(|p| p.n_reg).sum::<f64>().max(1.0),
        }
    }
}

/// Loss value plus its gradient with respect to every head prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<FlatHeads>,
}

/// Loss and logit gradient of one anchor.
pub fn class_loss(logits: [f64; 2], positive: bool, kind: ClassLoss) -> (f64, [f64; 2]) {
    let (t, o) = if positive { (1, 0) } else { (0, 1) };
    let m = logits[0].max(logits[1]);
    let lse = m + libm::log(libm::exp(logits[0] - m) + libm::exp(logits[1] - m));
    let log_p = logits[t] - lse;
    let p = libm::exp(log_p);
    let (loss, dt) = match kind {
        ClassLoss::CrossEntropy => (-log_p, p - 1.0),
        ClassLoss::Focal {
            gamma,
            weight_pos,
            weight_neg,
        } => {
            let w = if positive { weight_pos } else { weight_neg };
            let q = 1.0 - p;
            let qg = if gamma == 0.0 { 1.0 } else { libm::pow(q, gamma) };
            (-w * qg * log_p, w * qg * (gamma * p * log_p - q))
        }
    };
    let mut g = [0.0; 2];
    g[t] = dt;
    g[o] = -dt;
    (loss, g)
}

/// Smooth-L1 penalty and its derivative.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// Number of negatives mined for `positives` positives out of `available`.
pub fn negative_quota(positives: usize, available: usize, cfg: &OhemConfig) -> usize {
    let want = if positives == 0 {
        cfg.min_negatives
    } else {
        cfg.neg_pos_ratio * positives
    };
    want.min(available)
}

/// Keeps every positive and the hardest negatives by `cls_loss`. Ties go to
/// the lower anchor index.
pub fn ohem_select(cls_loss: &[f64], labels: &[AnchorLabel], cfg: &OhemConfig) -> Vec<bool> {
    let mut keep: Vec<bool> = labels.iter().map(|&l| l == AnchorLabel::Positive).collect();
    let positives = keep.iter().filter(|&&k| k).count();
    let mut negatives: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let quota = negative_quota(positives, negatives.len(), cfg);
    if quota == 0 {
        return keep;
    }
    let harder = |a: &usize, b: &usize| -> Ordering {
        cls_loss[*b].total_cmp(&cls_loss[*a]).then(a.cmp(b))
    };
    if quota < negatives.len() {
        negatives.select_nth_unstable_by(quota - 1, harder);
    }
    for &i in &negatives[..quota] {
        keep[i] = true;
    }
    keep
}

fn label_counts(m: &MatchResult) -> (usize, usize) {
    (m.count(AnchorLabel::Positive), m.count(AnchorLabel::Negative))
}

/// Raw (unfloored) counts for a set of images.
pub fn raw_normalizers(matches: &[MatchResult], cfg: &OhemConfig) -> Normalizers {
    let counts: Vec<(usize, usize)> = matches.iter().map(label_counts).collect();
    let (pos, selected) = match cfg.scope {
        OhemScope::PerImage => counts.iter().fold((0, 0), |(p, s), &(ip, ineg)| {
            (p + ip, s + ip + negative_quota(ip, ineg, cfg))
        }),
        OhemScope::PerBatch => {
            let p: usize = counts.iter().map(|c| c.0).sum();
            let n: usize = counts.iter().map(|c| c.1).sum();
            (p, p + negative_quota(p, n, cfg))
        }
    };
    Normalizers {
        n_cls: selected as f64,
        n_reg: pos as f64,
    }
}

/// Loss over a batch, normalized by the batch's own counts.
pub fn multitask_loss(
    preds: &[FlatHeads],
    matches: &[MatchResult],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let norm = Normalizers::combine(&[raw_normalizers(matches, &cfg.ohem)]);
    multitask_loss_with(preds, matches, cfg, norm)
}

/// Loss over a batch with externally supplied normalizers (e.g. summed over
/// all devices of a data-parallel step).
pub fn multitask_loss_with(
    preds: &[FlatHeads],
    matches: &[MatchResult],
    cfg: &LossConfig,
    norm: Normalizers,
) -> Result<LossOutput> {
    if preds.len() != matches.len() {
        return Err(Error::Shape(alloc::format!(
            "{} predictions for {} matched images",
            preds.len(),
            matches.len()
        )));
    }
    for (p, m) in preds.iter().zip(matches) {
        if p.len() != m.labels.len() {
            return Err(Error::Shape(alloc::format!(
                "predictions cover {} anchors, targets {}",
                p.len(),
                m.labels.len()
            )));
        }
    }
    // per-anchor classification loss and gradient for every non-ignored anchor
    let per_anchor: Vec<Vec<(f64, [f64; 2])>> = preds
        .iter()
        .zip(matches)
        .map(|(p, m)| {
            p.class
                .iter()
                .zip(&m.labels)
                .map(|(z, l)| match l {
                    AnchorLabel::Ignore => (0.0, [0.0; 2]),
                    _ => class_loss(*z, *l == AnchorLabel::Positive, cfg.class_loss),
                })
                .collect()
        })
        .collect();
    let selected: Vec<Vec<bool>> = match cfg.ohem.scope {
        OhemScope::PerImage => per_anchor
            .iter()
            .zip(matches)
            .map(|(pa, m)| {
                let losses: Vec<f64> = pa.iter().map(|x| x.0).collect();
                ohem_select(&losses, &m.labels, &cfg.ohem)
            })
            .collect(),
        OhemScope::PerBatch => {
            let losses: Vec<f64> = per_anchor.iter().flatten().map(|x| x.0).collect();
            let labels: Vec<AnchorLabel> =
                matches.iter().flat_map(|m| m.labels.iter().copied()).collect();
            let keep = ohem_select(&losses, &labels, &cfg.ohem);
            let mut out = Vec::with_capacity(matches.len());
            let mut at = 0;
            for m in matches {
                out.push(keep[at..at + m.labels.len()].to_vec());
                at += m.labels.len();
            }
            out
        }
    };

    let mut b = LossBreakdown {
        n_cls: norm.n_cls,
        n_reg: norm.n_reg,
        ..LossBreakdown::default()
    };
    let cls_scale = 1.0 / norm.n_cls;
    let box_scale = cfg.lambda_box / norm.n_reg;
    let lmk_scale = cfg.lambda_landmark / norm.n_reg;
    let mut grads = Vec::with_capacity(preds.len());
    for ((p, m), (pa, keep)) in preds.iter().zip(matches).zip(per_anchor.iter().zip(&selected)) {
        let mut g = FlatHeads::zeros(p.len());
        for i in 0..p.len() {
            if !keep[i] {
                continue;
            }
            match m.labels[i] {
                AnchorLabel::Positive => b.positives += 1,
                AnchorLabel::Negative => b.negatives += 1,
                AnchorLabel::Ignore => continue,
            }
            b.cls += pa[i].0;
            g.class[i] = [pa[i].1[0] * cls_scale, pa[i].1[1] * cls_scale];
        }
        for pos in &m.positives {
            let a = pos.anchor;
            for j in 0..4 {
                let (l, d) = smooth_l1(p.boxes[a][j] - pos.box_deltas[j], cfg.smooth_l1_beta);
                b.bbox += l;
                g.boxes[a][j] = d * box_scale;
            }
            if let Some(t) = &pos.landmark_deltas {
                for k in 0..NUM_LANDMARKS {
                    if !t.valid[k] {
                        continue;
                    }
                    for j in 2 * k..2 * k + 2 {
                        let (l, d) = smooth_l1(p.landmarks[a][j] - t.deltas[j], cfg.smooth_l1_beta);
                        b.landmark += l;
                        g.landmarks[a][j] = d * lmk_scale;
                    }
                }
            }
        }
        grads.push(g);
    }
    b.total = b.cls * cls_scale + b.bbox * box_scale + b.landmark * lmk_scale;
    Ok(LossOutput { breakdown: b, grads })
}

/// Gradient-free loss (for finite differences and logging).
pub fn loss_value(preds: &[FlatHeads], matches: &[MatchResult], cfg: &LossConfig) -> Result<f64> {
    multitask_loss(preds, matches, cfg).map(|o| o.breakdown.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::anchors::PositiveMatch;
    use crate::geometry::LandmarkDeltas;
    use proptest::prelude::*;

    fn oracle_select(losses: &[f64], labels: &[AnchorLabel]) -> Vec<bool> {
        let pos = labels.iter().filter(|l| **l == AnchorLabel::Positive).count();
        let mut negs: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
        // stable sort: equal losses keep ascending index order
        negs.sort_by(|a, b| losses[*b].partial_cmp(&losses[*a]).unwrap());
        let k = if pos == 0 { 16 } else { 3 * pos }.min(negs.len());
        let mut keep = vec![false; labels.len()];
        for i in 0..labels.len() {
            keep[i] = labels[i] == AnchorLabel::Positive;
        }
        for &i in &negs[..k] {
            keep[i] = true;
        }
        keep
    }

    #[test]
    fn two_positives_keep_six_hardest_negatives() {
        let mut labels = vec![AnchorLabel::Negative; 12];
        labels[3] = AnchorLabel::Positive;
        labels[7] = AnchorLabel::Positive;
        let losses: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let keep = ohem_select(&losses, &labels, &OhemConfig::default());
        let kept: Vec<usize> = (0..12).filter(|&i| keep[i]).collect();
        // negatives 11, 10, 9, 8, 6, 5 are the six highest
        assert_eq!(kept, vec![3, 5, 6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn no_positives_keep_sixteen() {
        let labels = vec![AnchorLabel::Negative; 40];
        let losses: Vec<f64> = (0..40).map(|i| ((i * 7) % 40) as f64).collect();
        let keep = ohem_select(&losses, &labels, &OhemConfig::default());
        assert_eq!(keep.iter().filter(|k| **k).count(), 16);
        for i in 0..40 {
            assert_eq!(keep[i], losses[i] >= 24.0);
        }
    }

    proptest! {
        #[test]
        fn selection_matches_sort_oracle(
            raw in prop::collection::vec((0u8..3, 0u8..20), 0..120)
        ) {
            let labels: Vec<AnchorLabel> = raw.iter().map(|(l, _)| match l {
                0 => AnchorLabel::Positive,
                1 => AnchorLabel::Negative,
                _ => AnchorLabel::Ignore,
            }).collect();
            // coarse losses so ties are common
            let losses: Vec<f64> = raw.iter().map(|(_, v)| *v as f64 / 4.0).collect();
            prop_assert_eq!(
                ohem_select(&losses, &labels, &OhemConfig::default()),
                oracle_select(&losses, &labels)
            );
        }

        #[test]
        fn focal_with_zero_gamma_is_cross_entropy(z0 in -20.0f64..20.0, z1 in -20.0f64..20.0, pos: bool) {
            let focal = ClassLoss::Focal { gamma: 0.0, weight_pos: 1.0, weight_neg: 1.0 };
            let (a, ga) = class_loss([z0, z1], pos, ClassLoss::CrossEntropy);
            let (b, gb) = class_loss([z0, z1], pos, focal);
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!((ga[0] - gb[0]).abs() < 1e-9 && (ga[1] - gb[1]).abs() < 1e-9);
        }

        #[test]
        fn class_gradients_match_finite_differences(
            z0 in -6.0f64..6.0, z1 in -6.0f64..6.0, pos: bool, gamma in 0.0f64..3.0
        ) {
            let kind = ClassLoss::Focal { gamma, weight_pos: 0.25, weight_neg: 0.75 };
            for k in [ClassLoss::CrossEntropy, kind] {
                let (_, g) = class_loss([z0, z1], pos, k);
                let h = 1e-6;
                for j in 0..2 {
                    let mut zp = [z0, z1];
                    let mut zm = [z0, z1];
                    zp[j] += h;
                    zm[j] -= h;
                    let fd = (class_loss(zp, pos, k).0 - class_loss(zm, pos, k).0) / (2.0 * h);
                    prop_assert!((fd - g[j]).abs() < 1e-6, "{fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn even_odds_cost_ln_two() {
        let (l, g) = class_loss([0.3, 0.3], true, ClassLoss::CrossEntropy);
        assert!((l - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_pieces_meet() {
        assert_eq!(smooth_l1(0.5, 1.0), (0.125, 0.5));
        assert_eq!(smooth_l1(-2.0, 1.0), (1.5, -1.0));
        assert_eq!(smooth_l1(1.0, 1.0), (0.5, 1.0));
        assert!((smooth_l1(1.0 - 1e-12, 1.0).0 - 0.5).abs() < 1e-11);
    }

    fn tiny_case() -> (Vec<FlatHeads>, Vec<MatchResult>) {
        let labels = vec![AnchorLabel::Positive, AnchorLabel::Negative, AnchorLabel::Ignore];
        let m = MatchResult {
            labels,
            max_iou: vec![0.6, 0.1, 0.4],
            positives: vec![PositiveMatch {
                anchor: 0,
                gt: 0,
                box_deltas: [0.1, -0.2, 0.3, 0.0],
                landmark_deltas: Some(LandmarkDeltas {
                    deltas: [0.5; 10],
                    valid: [true, false, true, true, true],
                }),
            }],
        };
        let mut p = FlatHeads::zeros(3);
        p.boxes[0] = [0.1, -0.2, 0.3, 0.0];
        p.landmarks[0] = [0.5; 10];
        (vec![p], vec![m])
    }

    #[test]
    fn exact_regression_gives_zero_regression_loss() {
        let (p, m) = tiny_case();
        let out = multitask_loss(&p, &m, &LossConfig::default()).unwrap();
        assert_eq!(out.breakdown.bbox, 0.0);
        assert_eq!(out.breakdown.landmark, 0.0);
        assert_eq!(out.breakdown.positives, 1);
        assert_eq!(out.breakdown.negatives, 1);
        assert!((out.breakdown.cls - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.breakdown.n_cls, 2.0);
        assert_eq!(out.breakdown.n_reg, 1.0);
    }

    #[test]
    fn masked_landmarks_get_no_gradient() {
        let (mut p, m) = tiny_case();
        p[0].landmarks[0][2] = 40.0;
        p[0].landmarks[0][3] = -7.0;
        let a = multitask_loss(&p, &m, &LossConfig::default()).unwrap();
        assert_eq!(a.breakdown.landmark, 0.0);
        assert_eq!(a.grads[0].landmarks[0][2], 0.0);
        assert_eq!(a.grads[0].landmarks[0][3], 0.0);
        p[0].landmarks[0][4] = 1.5;
        let b = multitask_loss(&p, &m, &LossConfig::default()).unwrap();
        assert!(b.breakdown.landmark > 0.0);
        assert!(b.grads[0].landmarks[0][4] > 0.0);
    }

    #[test]
    fn ignored_only_batch_is_zero() {
        let m = MatchResult {
            labels: vec![AnchorLabel::Ignore; 4],
            max_iou: vec![0.4; 4],
            positives: Vec::new(),
        };
        let p = FlatHeads::zeros(4);
        let out = multitask_loss(&[p], &[m], &LossConfig::default()).unwrap();
        assert_eq!(out.breakdown.total, 0.0);
        assert!(out.grads[0].class.iter().all(|g| *g == [0.0, 0.0]));
    }

    #[test]
    fn misaligned_predictions_are_rejected() {
        let (_, m) = tiny_case();
        assert!(multitask_loss(&[FlatHeads::zeros(2)], &m, &LossConfig::default()).is_err());
        assert!(multitask_loss(&[], &m, &LossConfig::default()).is_err());
    }

    #[test]
    fn per_batch_scope_pools_negatives() {
        let mk = |pos: usize, neg: usize| MatchResult {
            labels: (0..pos + neg)
                .map(|i| if i < pos { AnchorLabel::Positive } else { AnchorLabel::Negative })
                .collect(),
            max_iou: vec![0.0; pos + neg],
            positives: Vec::new(),
        };
        let ms = [mk(1, 2), mk(0, 40)];
        let img = OhemConfig::default();
        let batch = OhemConfig {
            scope: OhemScope::PerBatch,
            ..img
        };
        // per image: 1 + 2 (capped) and 16; per batch: 1 + 3
        assert_eq!(raw_normalizers(&ms, &img).n_cls, 19.0);
        assert_eq!(raw_normalizers(&ms, &batch).n_cls, 4.0);
    }
}
