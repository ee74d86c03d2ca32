//! Running a model over a dataset and writing evaluation reports (JSON plus
//! plot-ready PR-curve CSVs).

use std::path::Path;

use facedet_core::annotation::{Difficulty, Face};
use facedet_core::eval::{
    experiment_stats, landmark_mae, voc_ap, EvalReport, ExperimentStats, LandmarkProtocol, LandmarkReport,
};
use facedet_core::model::Detector;
use facedet_core::postprocess::{tta_detect, Detection, TtaConfig};
use serde_json::{json, Value};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// TTA detections for every image of `data`.
pub fn detect_all(model: &mut Detector, data: &Dataset, tta: &TtaConfig) -> Result<Vec<Vec<Detection>>> {
    (0..data.len())
        .map(|i| Ok(tta_detect(model, &data.image(i)?, tta)?))
        .collect()
}

pub fn ground_truth(data: &Dataset) -> Vec<Vec<Face>> {
    data.annotations.iter().map(|a| a.faces.clone()).collect()
}

/// Detection AP and, when the ground truth carries landmarks, the landmark
/// error of detections matched at `iou`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub detection: EvalReport,
    pub landmarks: Option<LandmarkReport>,
}

impl Evaluation {
    /// Hard-set AP, the headline metric (0 when the set is empty).
    pub fn hard_ap(&self) -> f64 {
        self.detection.ap(Difficulty::Hard).unwrap_or(0.0)
    }
}

pub fn evaluate(dets: &[Vec<Detection>], data: &Dataset, iou: f64, name: &str) -> Result<Evaluation> {
    let gts = ground_truth(data);
    let detection = voc_ap(dets, &gts, iou)?;
    let has_landmarks = gts.iter().flatten().any(|f| f.landmarks.is_some_and(|l| l.any_valid()));
    let landmarks = if has_landmarks {
        Some(landmark_mae(dets, &gts, LandmarkProtocol::Matched { iou_threshold: iou }, name)?)
    } else {
        None
    };
    Ok(Evaluation { detection, landmarks })
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

pub fn eval_json(e: &EvalReport) -> Value {
    let sets: serde_json::Map<String, Value> = Difficulty::ALL
        .iter()
        .map(|d| {
            let s = &e.sets[d.index()];
            (
                d.name().to_string(),
                json!({
                    "ap": opt(s.ap),
                    "num_gt": s.num_gt,
                    "num_det": s.num_det,
                    "true_positives": s.true_positives,
                }),
            )
        })
        .collect();
    json!({ "sets": sets, "overall": opt(e.overall) })
}

pub fn landmark_json(r: &LandmarkReport) -> Value {
    json!({
        "dataset": r.dataset,
        "mae": r.mae,
        "std": r.std,
        "faces": r.faces,
        "evaluated": r.errors.len(),
        "misses": r.misses,
        "miss_rate": r.miss_rate(),
        "skipped": r.skipped,
    })
}

pub fn stats_json(s: &ExperimentStats) -> Value {
    json!({
        "variants": s.variants.iter().map(|v| json!({
            "name": v.name, "metric": v.metric, "delta": v.delta, "runs": v.runs,
        })).collect::<Vec<_>>(),
        "mean": s.mean,
        "cross_std": s.cross_std,
        "repeat": s.repeat.as_ref().map(|r| json!({
            "name": r.name, "values": r.values, "mean": r.mean, "std": r.std,
        })),
        "no_significant_difference": s.no_significant_difference,
    })
}

/// `threshold,recall,precision` rows of one set.
pub fn pr_csv(e: &EvalReport, set: Difficulty) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in &e.sets[set.index()].curve {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.recall, p.precision));
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v).expect("json serializes") + "\n"))
}

/// `eval.json` and `pr_<set>.csv` under `dir`; `config` is the snapshot the
/// results came from.
pub fn write_evaluation(dir: &Path, e: &Evaluation, config: &str) -> Result<()> {
    let mut v = json!({ "detection": eval_json(&e.detection), "config": config });
    if let Some(l) = &e.landmarks {
        v["landmarks"] = landmark_json(l);
    }
    write_json(&dir.join("eval.json"), &v)?;
    for d in Difficulty::ALL {
        write(&dir.join(format!("pr_{}.csv", d.name())), &pr_csv(&e.detection, d))?;
    }
    Ok(())
}

/// Aggregates per-variant metrics (and optional repeats) into the stats
/// report and its text table.
pub fn write_experiment(
    dir: &Path,
    variants: &[(String, Vec<f64>)],
    repeats: Option<(String, Vec<f64>)>,
    metric: &str,
    config: &str,
) -> Result<ExperimentStats> {
    let stats = experiment_stats(variants, repeats)?;
    let mut v = stats_json(&stats);
    v["metric"] = json!(metric);
    v["config"] = json!(config);
    write_json(&dir.join("stats.json"), &v)?;
    write(&dir.join("table.txt"), &stats.table(metric, 100.0))?;
    Ok(stats)
}
