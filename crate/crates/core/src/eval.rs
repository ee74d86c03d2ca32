//! Detection AP, landmark error and cross-run statistics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::annotation::{Difficulty, Face};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Landmarks, Point, NUM_LANDMARKS};
use crate::graph::ParamStore;
use crate::postprocess::Detection;

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// AP of one evaluation set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SetResult {
    /// `None` when the set has no ground truth.
    pub ap: Option<f64>,
    pub curve: Vec<PrPoint>,
    pub num_gt: usize,
    /// Detections counted (true plus false positives).
    pub num_det: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// Indexed by [`Difficulty::index`].
    pub sets: [SetResult; 3],
    /// Mean of the three set APs (absent unless all three exist).
    pub overall: Option<f64>,
}

impl EvalReport {
    pub fn ap(&self, set: Difficulty) -> Option<f64> {
        self.sets[set.index()].ap
    }
}

/// Area under the monotone precision envelope: at every distinct recall the
/// precision is the best precision at that recall or higher.
pub fn envelope_ap(curve: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, p) in curve.iter().enumerate() {
        if p.recall > prev_recall {
            let best = curve[i..].iter().map(|q| q.precision).fold(0.0, f64::max);
            ap += (p.recall - prev_recall) * best;
            prev_recall = p.recall;
        }
    }
    ap
}

/// Per-detection outcome within one set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    True,
    False,
    /// Matched a face outside the evaluated set.
    Ignored,
}

/// Matches one image. Every detection goes to its highest-IoU face (IoU >
/// `thresh`); for each face only its highest-IoU detection is a true
/// positive, the rest are false positives. Detections whose face is outside
/// the set are ignored.
fn match_image(dets: &[Detection], faces: &[Face], set: Difficulty, thresh: f64) -> Vec<Outcome> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; dets.len()];
    for (i, d) in dets.iter().enumerate() {
        for (g, f) in faces.iter().enumerate() {
            let o = iou(&d.bbox, &f.bbox);
            if o > thresh && best[i].is_none_or(|(_, b)| o > b) {
                best[i] = Some((g, o));
            }
        }
    }
    // winner per face: highest IoU, then higher score, then lower index
    let mut winner: Vec<Option<usize>> = vec![None; faces.len()];
    for (i, b) in best.iter().enumerate() {
        if let Some((g, o)) = *b {
            let better = match winner[g] {
                None => true,
                Some(w) => {
                    let ow = best[w].expect("winner matched").1;
                    o > ow || (o == ow && dets[i].score > dets[w].score)
                }
            };
            if better {
                winner[g] = Some(i);
            }
        }
    }
    best.iter()
        .enumerate()
        .map(|(i, b)| match *b {
            None => Outcome::False,
            Some((g, _)) if !faces[g].in_set(set) => Outcome::Ignored,
            Some((g, _)) if winner[g] == Some(i) => Outcome::True,
            Some(_) => Outcome::False,
        })
        .collect()
}

/// PASCAL VOC style AP per difficulty set. Detections tied in score are
/// accumulated together, so the result does not depend on input order.
pub fn voc_ap(dets: &[Vec<Detection>], gts: &[Vec<Face>], iou_thresh: f64) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(alloc::format!(
            "detections for {} images, ground truth for {}",
            dets.len(),
            gts.len()
        )));
    }
    let mut report = EvalReport::default();
    for set in Difficulty::ALL {
        let num_gt: usize = gts
            .iter()
            .map(|fs| fs.iter().filter(|f| f.in_set(set)).count())
            .sum();
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for (d, g) in dets.iter().zip(gts) {
            for (det, o) in d.iter().zip(match_image(d, g, set, iou_thresh)) {
                match o {
                    Outcome::True => scored.push((det.score, true)),
                    Outcome::False => scored.push((det.score, false)),
                    Outcome::Ignored => {}
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut curve = Vec::new();
        let (mut tp, mut n) = (0usize, 0usize);
        let mut i = 0;
        while i < scored.len() {
            let s = scored[i].0;
            while i < scored.len() && scored[i].0 == s {
                tp += scored[i].1 as usize;
                n += 1;
                i += 1;
            }
            if num_gt > 0 {
                curve.push(PrPoint {
                    threshold: s,
                    recall: tp as f64 / num_gt as f64,
                    precision: tp as f64 / n as f64,
                });
            }
        }
        report.sets[set.index()] = SetResult {
            ap: (num_gt > 0).then(|| envelope_ap(&curve)),
            curve,
            num_gt,
            num_det: scored.len(),
            true_positives: tp,
        };
    }
    let aps: Vec<f64> = report.sets.iter().filter_map(|s| s.ap).collect();
    report.overall = (aps.len() == 3).then(|| aps.iter().sum::<f64>() / 3.0);
    Ok(report)
}

/// Normalized absolute landmark error of one face:
/// `2 / (k * sqrt(h^2 + w^2)) * sum(|dx| + |dy|)` over the `k` points valid
/// in both sets (`k = 5` for complete annotations). `None` when the box is
/// degenerate or no point is comparable.
pub fn landmark_ae(pred: &Landmarks, gt: &Landmarks, gt_box: &BBox) -> Option<f64> {
    let diag = libm::sqrt(gt_box.width() * gt_box.width() + gt_box.height() * gt_box.height());
    if !(diag > 0.0) {
        return None;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..NUM_LANDMARKS {
        if let (Some(p), Some(q)) = (pred.get(i), gt.get(i)) {
            sum += (p.x - q.x).abs() + (p.y - q.y).abs();
            k += 1;
        }
    }
    (k > 0).then(|| 2.0 * sum / (k as f64 * diag))
}

/// Which prediction is compared with a ground-truth face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LandmarkProtocol {
    /// Per image: the highest-confidence detection against the face nearest
    /// the image center (single-face benchmarks).
    HighestConfidence { image_size: Option<(f64, f64)> },
    /// Per face: the highest-IoU detection above the threshold.
    Matched { iou_threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkReport {
    pub dataset: String,
    /// Error of every evaluated face.
    pub errors: Vec<f64>,
    pub mae: f64,
    /// Sample standard deviation of `errors`.
    pub std: f64,
    /// Faces without a usable prediction (excluded from `mae`).
    pub misses: usize,
    /// Faces skipped for a degenerate box or missing annotation.
    pub skipped: usize,
    pub faces: usize,
}

impl LandmarkReport {
    pub fn miss_rate(&self) -> f64 {
        let n = self.faces - self.skipped;
        if n == 0 {
            0.0
        } else {
            self.misses as f64 / n as f64
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, libm::sqrt(v))
}

/// Landmark mAE over a dataset.
pub fn landmark_mae(
    dets: &[Vec<Detection>],
    gts: &[Vec<Face>],
    protocol: LandmarkProtocol,
    dataset: &str,
) -> Result<LandmarkReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(alloc::format!(
            "detections for {} images, ground truth for {}",
            dets.len(),
            gts.len()
        )));
    }
    let mut r = LandmarkReport {
        dataset: dataset.into(),
        ..LandmarkReport::default()
    };
    let record = |pred: Option<&Detection>, face: &Face, r: &mut LandmarkReport| {
        r.faces += 1;
        let Some(gt) = face.landmarks.filter(|l| l.any_valid()) else {
            r.skipped += 1;
            return;
        };
        match pred {
            None => r.misses += 1,
            Some(d) => match landmark_ae(&d.landmarks, &gt, &face.bbox) {
                Some(e) => r.errors.push(e),
                None => r.skipped += 1,
            },
        }
    };
    for (d, faces) in dets.iter().zip(gts) {
        match protocol {
            LandmarkProtocol::HighestConfidence { image_size } => {
                if faces.is_empty() {
                    continue;
                }
                let face = match image_size {
                    Some((w, h)) => {
                        let dist = |f: &Face| {
                            let c = f.bbox.center();
                            let (dx, dy) = (c.x - w / 2.0, c.y - h / 2.0);
                            dx * dx + dy * dy
                        };
                        faces
                            .iter()
                            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
                            .expect("non-empty")
                    }
                    None => &faces[0],
                };
                let top = d.iter().max_by(|a, b| a.score.total_cmp(&b.score));
                record(top, face, &mut r);
            }
            LandmarkProtocol::Matched { iou_threshold } => {
                for face in faces {
                    let best = d
                        .iter()
                        .map(|x| (x, iou(&x.bbox, &face.bbox)))
                        .filter(|(_, o)| *o > iou_threshold)
                        .max_by(|a, b| a.1.total_cmp(&b.1))
                        .map(|(x, _)| x);
                    record(best, face, &mut r);
                }
            }
        }
    }
    (r.mae, r.std) = mean_std(&r.errors);
    Ok(r)
}

/// Reduction of a dense landmark annotation to the five-point scheme: each
/// output point is the mean of the listed source indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointReduction {
    pub name: String,
    pub sources: [Vec<usize>; NUM_LANDMARKS],
}

impl PointReduction {
    pub fn apply(&self, points: &[Point]) -> Result<Landmarks> {
        let mut out = Landmarks::missing();
        for (i, src) in self.sources.iter().enumerate() {
            if src.is_empty() || src.iter().any(|&j| j >= points.len()) {
                return Err(Error::Shape(alloc::format!(
                    "reduction {} needs {} source points, got {}",
                    self.name,
                    src.iter().max().map_or(0, |m| m + 1),
                    points.len()
                )));
            }
            let n = src.len() as f64;
            let x = src.iter().map(|&j| points[j].x).sum::<f64>() / n;
            let y = src.iter().map(|&j| points[j].y).sum::<f64>() / n;
            out.set(i, Some(Point::new(x, y)));
        }
        Ok(out)
    }
}

/// Cross-variant comparison in the style of a "metric (Δ from mean)" table.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantStat {
    pub name: String,
    /// Mean over this variant's runs.
    pub metric: f64,
    pub delta: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatStat {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentStats {
    pub variants: Vec<VariantStat>,
    /// Mean of the variant metrics.
    pub mean: f64,
    /// Sample standard deviation of the variant metrics.
    pub cross_std: f64,
    pub repeat: Option<RepeatStat>,
    /// `cross_std <= repeat std`: the differences between variants are no
    /// larger than run-to-run noise.
    pub no_significant_difference: Option<bool>,
}

/// Cross-variant mean, spread and per-variant divergence, plus the spread of
/// repeated runs of one fixed variant. Uses sample (n - 1) deviations.
pub fn experiment_stats(
    variants: &[(String, Vec<f64>)],
    repeats: Option<(String, Vec<f64>)>,
) -> Result<ExperimentStats> {
    let enough_variants = variants.len() >= 2;
    let enough_repeats = repeats.as_ref().is_some_and(|r| r.1.len() >= 2);
    if !enough_variants && !enough_repeats {
        return Err(Error::Statistics(
            "need at least two variants or two repeated runs".into(),
        ));
    }
    if variants.iter().any(|v| v.1.is_empty()) {
        return Err(Error::Statistics("a variant has no runs".into()));
    }
    let metrics: Vec<f64> = variants.iter().map(|v| mean_std(&v.1).0).collect();
    let (mean, cross_std) = mean_std(&metrics);
    let stats = variants
        .iter()
        .zip(&metrics)
        .map(|(v, &m)| VariantStat {
            name: v.0.clone(),
            metric: m,
            delta: m - mean,
            runs: v.1.len(),
        })
        .collect();
    let repeat = match repeats {
        Some((name, values)) if values.len() >= 2 => {
            let (m, s) = mean_std(&values);
            Some(RepeatStat {
                name,
                values,
                mean: m,
                std: s,
            })
        }
        Some(_) => {
            return Err(Error::Statistics("repeated runs need at least two samples".into()))
        }
        None => None,
    };
    let no_significant_difference = match (&repeat, enough_variants) {
        (Some(r), true) => Some(cross_std <= r.std),
        _ => None,
    };
    Ok(ExperimentStats {
        variants: stats,
        mean,
        cross_std,
        repeat,
        no_significant_difference,
    })
}

impl ExperimentStats {
    /// Text table: one "name  metric (±Δ)" row per variant, then the mean
    /// ± cross-variant std and, when present, the repeated-run line. Values
    /// are multiplied by `scale` (100 for percentages).
    pub fn table(&self, metric_name: &str, scale: f64) -> String {
        use core::fmt::Write;
        let width = self.variants.iter().map(|v| v.name.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {metric_name} (Δ)", "Head");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{:<width$}  {:.2} ({:+.2})",
                v.name,
                v.metric * scale,
                v.delta * scale
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:.2} ± {:.2}",
            "Average",
            self.mean * scale,
            self.cross_std * scale
        );
        if let Some(r) = &self.repeat {
            let _ = writeln!(
                s,
                "{:<width$}  {:.2} ± {:.2}  ({} repeats of {})",
                "Repeated",
                r.mean * scale,
                r.std * scale,
                r.values.len(),
                r.name
            );
        }
        if let Some(flag) = self.no_significant_difference {
            let _ = writeln!(
                s,
                "cross-variant std {} repeated-run std: {}",
                if flag { "<=" } else { ">" },
                if flag {
                    "no significant difference between variants"
                } else {
                    "variant spread exceeds run-to-run noise"
                }
            );
        }
        s
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters(params: &ParamStore) -> usize {
    params.num_scalars()
}
