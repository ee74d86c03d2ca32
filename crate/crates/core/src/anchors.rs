//! Anchor pyramid generation and ground-truth assignment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::annotation::Face;
use crate::error::{Error, Result};
use crate::geometry::{encode_box, encode_landmarks, iou, BBox, BoxDeltas, LandmarkDeltas};

/// One pyramid level: feature stride and base anchor side in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidLevel {
    pub stride: usize,
    pub scale: f64,
}

/// Stride/scale ladder plus per-location scale multipliers. All anchors are
/// square.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSpec {
    pub levels: Vec<PyramidLevel>,
    pub scale_multipliers: Vec<f64>,
}

impl Default for PyramidSpec {
    /// P2..P7 with three octave-third multipliers per location.
    fn default() -> Self {
        Self::six_level(vec![
            1.0,
            libm::pow(2.0, 1.0 / 3.0),
            libm::pow(2.0, 2.0 / 3.0),
        ])
    }
}

impl PyramidSpec {
    /// Strides 4..128 with base scales 16, 32, 64, 128, 256, 516.
    pub fn six_level(scale_multipliers: Vec<f64>) -> Self {
        let levels = [(4, 16.0), (8, 32.0), (16, 64.0), (32, 128.0), (64, 256.0), (128, 516.0)]
            .into_iter()
            .map(|(stride, scale)| PyramidLevel { stride, scale })
            .collect();
        Self {
            levels,
            scale_multipliers,
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scale_multipliers.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    /// Rejects empty ladders, non-doubling strides and non-positive scales.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid has no levels".into()));
        }
        if self.scale_multipliers.is_empty() {
            return Err(Error::Config("pyramid has no scale multipliers".into()));
        }
        if self.scale_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("scale multipliers must be positive".into()));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.stride == 0 || !(level.scale > 0.0) {
                return Err(Error::Config(format!(
                    "pyramid level {i} has non-positive stride or scale"
                )));
            }
            if i > 0 && level.stride != 2 * self.levels[i - 1].stride {
                return Err(Error::Config(format!(
                    "pyramid strides must double: level {i} has stride {} after {}",
                    level.stride,
                    self.levels[i - 1].stride
                )));
            }
        }
        Ok(())
    }

    /// Feature-map size of every level for an image of the given size.
    pub fn level_shapes(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| (height.div_ceil(l.stride), width.div_ceil(l.stride)))
            .collect()
    }

    /// Closed-form anchor count for an image of the given size.
    pub fn anchor_count(&self, width: usize, height: usize) -> usize {
        self.level_shapes(width, height)
            .iter()
            .map(|(h, w)| h * w * self.anchors_per_cell())
            .sum()
    }
}

/// Position of an anchor in the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorIndex {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub scale: usize,
}

/// The dense anchor set for one image size, ordered level-major, then row,
/// column and scale multiplier. Head outputs use the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub boxes: Vec<BBox>,
    pub image_size: (usize, usize),
    /// `(rows, cols)` of each level.
    pub level_shapes: Vec<(usize, usize)>,
    /// Index of the first anchor of each level.
    pub level_offsets: Vec<usize>,
    pub anchors_per_cell: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Inverse of the flat ordering.
    pub fn index_of(&self, flat: usize) -> AnchorIndex {
        let level = self.level_offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.level_offsets[level];
        let k = self.anchors_per_cell;
        let cols = self.level_shapes[level].1;
        AnchorIndex {
            level,
            row: local / (cols * k),
            col: (local / k) % cols,
            scale: local % k,
        }
    }

    pub fn flat_index(&self, idx: AnchorIndex) -> usize {
        let cols = self.level_shapes[idx.level].1;
        self.level_offsets[idx.level]
            + (idx.row * cols + idx.col) * self.anchors_per_cell
            + idx.scale
    }
}

/// Tiles square anchors centered on every cell of every level.
pub fn build_anchors(spec: &PyramidSpec, width: usize, height: usize) -> Result<AnchorGrid> {
    spec.validate()?;
    let level_shapes = spec.level_shapes(width, height);
    let mut boxes = Vec::with_capacity(spec.anchor_count(width, height));
    let mut level_offsets = Vec::with_capacity(spec.levels.len());
    for (level, &(rows, cols)) in spec.levels.iter().zip(&level_shapes) {
        level_offsets.push(boxes.len());
        let s = level.stride as f64;
        for i in 0..rows {
            let cy = (i as f64 + 0.5) * s;
            for j in 0..cols {
                let cx = (j as f64 + 0.5) * s;
                for m in &spec.scale_multipliers {
                    let side = level.scale * m;
                    boxes.push(BBox::from_center(cx, cy, side, side));
                }
            }
        }
    }
    Ok(AnchorGrid {
        boxes,
        image_size: (width, height),
        level_shapes,
        level_offsets,
        anchors_per_cell: spec.anchors_per_cell(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Anchors with IoU at or above this are positive.
    pub positive_iou: f64,
    /// Anchors whose best IoU is below this are negative.
    pub negative_iou: f64,
    /// Let a face whose best anchor overlaps less than `positive_iou` still
    /// claim that anchor.
    pub rescue_low_quality: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            negative_iou: 0.3,
            rescue_low_quality: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Training targets of one positive anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveMatch {
    pub anchor: usize,
    pub gt: usize,
    pub box_deltas: BoxDeltas,
    /// `None` when the face has no usable landmarks at all.
    pub landmark_deltas: Option<LandmarkDeltas>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Best IoU of each anchor over the trainable faces.
    pub max_iou: Vec<f64>,
    /// Positives in ascending anchor order.
    pub positives: Vec<PositiveMatch>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Assigns faces to anchors.
///
/// Each anchor takes its highest-IoU trainable face (ties go to the lowest
/// face index) and is labeled by the IoU thresholds. Every face then claims
/// its best still-unclaimed anchor, provided that IoU reaches the positive
/// threshold, or is merely non-zero when low-quality rescue is on.
pub fn match_anchors(grid: &AnchorGrid, faces: &[Face], cfg: &MatchConfig) -> Result<MatchResult> {
    let n = grid.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut max_iou = vec![0.0f64; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let trainable: Vec<usize> = (0..faces.len()).filter(|&g| faces[g].is_trainable()).collect();
    if trainable.is_empty() {
        return Ok(MatchResult {
            labels,
            max_iou,
            positives: Vec::new(),
        });
    }

    // best anchor per face, tracked while scanning
    let mut face_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); faces.len()];
    for (a, anchor) in grid.boxes.iter().enumerate() {
        let mut best = (0.0, None);
        for &g in &trainable {
            let v = iou(anchor, &faces[g].bbox);
            if v > best.0 {
                best = (v, Some(g));
            }
            if v > face_best[g].0 {
                face_best[g] = (v, a);
            }
        }
        max_iou[a] = best.0;
        if best.0 >= cfg.positive_iou {
            labels[a] = AnchorLabel::Positive;
            assigned[a] = best.1;
        } else if best.0 >= cfg.negative_iou {
            labels[a] = AnchorLabel::Ignore;
        }
    }

    let floor = if cfg.rescue_low_quality { f64::MIN_POSITIVE } else { cfg.positive_iou };
    let mut forced = vec![false; n];
    for &g in &trainable {
        let (mut best_v, mut best_a) = face_best[g];
        if best_a == usize::MAX {
            continue;
        }
        if forced[best_a] {
            // another face already claimed this anchor; fall back to the next best
            (best_v, best_a) = (0.0, usize::MAX);
            for (a, anchor) in grid.boxes.iter().enumerate() {
                if forced[a] {
                    continue;
                }
                let v = iou(anchor, &faces[g].bbox);
                if v > best_v {
                    (best_v, best_a) = (v, a);
                }
            }
        }
        if best_a != usize::MAX && best_v >= floor {
            forced[best_a] = true;
            labels[best_a] = AnchorLabel::Positive;
            assigned[best_a] = Some(g);
        }
    }

    let mut positives = Vec::new();
    for a in 0..n {
        if labels[a] != AnchorLabel::Positive {
            continue;
        }
        let g = assigned[a].expect("positive anchor without a face");
        let face = &faces[g];
        let anchor = &grid.boxes[a];
        let box_deltas = encode_box(&face.bbox, anchor)?;
        let landmark_deltas = match &face.landmarks {
            Some(lm) if lm.any_valid() => Some(encode_landmarks(lm, anchor)?),
            _ => None,
        };
        positives.push(PositiveMatch {
            anchor: a,
            gt: g,
            box_deltas,
            landmark_deltas,
        });
    }
    Ok(MatchResult {
        labels,
        max_iou,
        positives,
    })
}
