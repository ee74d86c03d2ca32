//! From head outputs to final detections: decode, filter, NMS, box voting
//! and test-time augmentation.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::anchors::{build_anchors, AnchorGrid};
use crate::error::{Error, Result};
use crate::geometry::{
    decode_box_unchecked, decode_landmarks_unchecked, iou, BBox, LandmarkDeltas, Landmarks,
    NUM_LANDMARKS,
};
use crate::image::{to_batch, Image, Normalization};
use crate::model::{Detector, FlatHeads};

/// Which augmented pass produced a detection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TtaSource {
    pub scale: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub landmarks: Landmarks,
    /// Face probability.
    pub score: f64,
    pub source: TtaSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Detections with a lower face probability are discarded.
    pub score_threshold: f64,
    /// Boxes shorter than this (after clipping) are discarded.
    pub min_height: f64,
    /// Optional cap on candidates kept (by score) before NMS.
    pub max_candidates: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.02,
            min_height: 5.0,
            max_candidates: None,
        }
    }
}

/// Upper bound on the log size ratio fed to `exp` while decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Face probability of a two-class logit pair.
pub fn face_probability(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + libm::exp(logits[0] - logits[1]))
}

/// Decodes one image's predictions into clipped, filtered detections in
/// anchor order.
pub fn decode(heads: &FlatHeads, grid: &AnchorGrid, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    if heads.len() != grid.len() {
        return Err(Error::Shape(alloc::format!(
            "{} predictions for {} anchors",
            heads.len(),
            grid.len()
        )));
    }
    let (w, h) = (grid.image_size.0 as f64, grid.image_size.1 as f64);
    let mut out = Vec::new();
    for (i, anchor) in grid.boxes.iter().enumerate() {
        let score = face_probability(heads.class[i]);
        if !(score >= cfg.score_threshold) {
            continue;
        }
        let mut d = heads.boxes[i];
        d[2] = d[2].min(MAX_LOG_SCALE);
        d[3] = d[3].min(MAX_LOG_SCALE);
        let bbox = decode_box_unchecked(&d, anchor).clip(w, h);
        if !(bbox.height() >= cfg.min_height) {
            continue;
        }
        let lmk = LandmarkDeltas {
            deltas: heads.landmarks[i],
            valid: [true; NUM_LANDMARKS],
        };
        out.push(Detection {
            bbox,
            landmarks: decode_landmarks_unchecked(&lmk, anchor),
            score,
            source: TtaSource {
                scale: 1.0,
                flipped: false,
            },
        });
    }
    if let Some(k) = cfg.max_candidates {
        if out.len() > k {
            let order = score_order(&out);
            let mut keep: Vec<usize> = order[..k].to_vec();
            keep.sort_unstable();
            out = keep.into_iter().map(|i| out[i]).collect();
        }
    }
    Ok(out)
}

/// Indices by descending score; equal scores keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmsResult {
    /// Kept indices in descending score order.
    pub keep: Vec<usize>,
    /// For every input, the kept detection that suppressed it (`None` for
    /// kept detections).
    pub suppressed_by: Vec<Option<usize>>,
}

/// Greedy NMS: sweeping by descending score, a detection is dropped when its
/// IoU with an already kept one exceeds `iou_threshold`, and is attributed to
/// the first (highest-scoring) such detection.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> NmsResult {
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed_by = alloc::vec![None; dets.len()];
    for i in score_order(dets) {
        match keep
            .iter()
            .find(|&&k| iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold)
        {
            Some(&k) => suppressed_by[i] = Some(k),
            None => keep.push(i),
        }
    }
    NmsResult {
        keep,
        suppressed_by,
    }
}

/// Weight of one voter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteWeight {
    /// IoU with the kept box.
    Iou,
    /// IoU times the voter's score.
    ScoreIou,
}

/// Replaces each kept box by the weighted mean of all detections whose IoU
/// with it exceeds `iou_threshold` (itself included). Scores stay unchanged;
/// landmarks come from the highest-scoring voter.
pub fn box_vote(
    kept: &[Detection],
    all: &[Detection],
    iou_threshold: f64,
    weight: VoteWeight,
) -> Vec<Detection> {
    kept.iter()
        .map(|k| {
            let mut acc = [0.0; 4];
            let mut total = 0.0;
            let mut best = *k;
            let mut any = false;
            for d in all {
                let o = iou(&k.bbox, &d.bbox);
                if !(o > iou_threshold) {
                    continue;
                }
                let w = match weight {
                    VoteWeight::Iou => o,
                    VoteWeight::ScoreIou => o * d.score,
                };
                for (a, v) in acc.iter_mut().zip(d.bbox.to_array()) {
                    *a += w * v;
                }
                total += w;
                if !any || d.score > best.score {
                    best = *d;
                    any = true;
                }
            }
            let mut out = *k;
            if total > 0.0 {
                out.bbox = BBox::new(acc[0] / total, acc[1] / total, acc[2] / total, acc[3] / total);
            }
            out.landmarks = best.landmarks;
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaConfig {
    /// Resize factors applied to the whole image.
    pub scales: Vec<f64>,
    pub flip: bool,
    pub decode: DecodeConfig,
    pub nms_iou: f64,
    pub vote_iou: f64,
    pub vote_weight: VoteWeight,
    pub normalization: Normalization,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            scales: alloc::vec![0.5, 1.0, 1.5],
            flip: true,
            decode: DecodeConfig::default(),
            nms_iou: 0.3,
            vote_iou: 0.5,
            vote_weight: VoteWeight::Iou,
            normalization: Normalization::default(),
        }
    }
}

impl TtaConfig {
    /// One pass at the original size, no flip.
    pub fn single_scale() -> Self {
        Self {
            scales: alloc::vec![1.0],
            flip: false,
            ..Self::default()
        }
    }
}

/// NMS followed by box voting over the same pool.
pub fn suppress_and_vote(pool: &[Detection], cfg: &TtaConfig) -> Vec<Detection> {
    let res = nms(pool, cfg.nms_iou);
    let kept: Vec<Detection> = res.keep.iter().map(|&i| pool[i]).collect();
    box_vote(&kept, pool, cfg.vote_iou, cfg.vote_weight)
}

/// Raw (pre-NMS) detections of one pass, mapped back to the coordinates of
/// `image`.
pub fn detect_pass(
    model: &mut Detector,
    image: &Image,
    scale: f64,
    flip: bool,
    cfg: &TtaConfig,
) -> Result<Vec<Detection>> {
    if !(scale > 0.0) {
        return Err(Error::Config("TTA scales must be positive".into()));
    }
    let (w0, h0) = (image.width(), image.height());
    let w = (libm::round(w0 as f64 * scale) as usize).max(1);
    let h = (libm::round(h0 as f64 * scale) as usize).max(1);
    let mut input = image.resize(w, h);
    if flip {
        input = input.flip_horizontal();
    }
    let batch = to_batch(&[&input], &cfg.normalization)?;
    let heads = model.predict(&batch)?;
    let grid = build_anchors(&model.spec().pyramid, w, h)?;
    let mut dets = decode(&heads.flatten(0), &grid, &cfg.decode)?;
    let (sx, sy) = (w as f64 / w0 as f64, h as f64 / h0 as f64);
    for d in &mut dets {
        if flip {
            d.bbox = d.bbox.flip_horizontal(w as f64);
            d.landmarks = d.landmarks.flip_horizontal(w as f64);
        }
        d.bbox = BBox::new(d.bbox.x1 / sx, d.bbox.y1 / sy, d.bbox.x2 / sx, d.bbox.y2 / sy);
        for p in d.landmarks.points.iter_mut() {
            p.x /= sx;
            p.y /= sy;
        }
        d.source = TtaSource {
            scale,
            flipped: flip,
        };
    }
    Ok(dets)
}

/// Runs every scale (and its mirrored copy when enabled), pools the
/// detections and applies NMS and box voting once.
pub fn tta_detect(model: &mut Detector, image: &Image, cfg: &TtaConfig) -> Result<Vec<Detection>> {
    if cfg.scales.is_empty() {
        return Err(Error::Config("at least one TTA scale is required".into()));
    }
    let mut pool = Vec::new();
    for &s in &cfg.scales {
        pool.extend(detect_pass(model, image, s, false, cfg)?);
        if cfg.flip {
            pool.extend(detect_pass(model, image, s, true, cfg)?);
        }
    }
    Ok(suppress_and_vote(&pool, cfg))
}

/// Orders detections by descending score (stable).
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
}
