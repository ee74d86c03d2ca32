//! Run configuration: a TOML file with one section per component. Unknown
//! keys are rejected; `run.seed` is the only required value.
//!
//! Precedence: command-line flags > configuration file > built-in defaults.
//! Relative paths are resolved against the directory of the configuration
//! file, so the written `config.snapshot` (absolute paths, every default
//! filled in) reproduces a run on its own.

use std::path::{Path, PathBuf};

use facedet_core::anchors::{MatchConfig, PyramidLevel, PyramidSpec};
use facedet_core::loss::{ClassLoss, LossConfig, OhemConfig, OhemScope};
use facedet_core::model::{
    BackboneSpec, ContextModuleSpec, ContextVariant, ModelSpec, NormKind, PostContext,
};
use facedet_core::optim::{LrScaling, OptimizerSpec, ScheduleSpec};
use facedet_core::postprocess::{DecodeConfig, TtaConfig, VoteWeight};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Output directory (`--output` overrides).
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Simulated data-parallel devices.
    #[serde(default = "one")]
    pub devices: usize,
    /// Evaluate after every epoch and keep the best checkpoint as
    /// `checkpoints/best.ckpt`.
    #[serde(default)]
    pub select_best: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `tiny-stub`, `mobilenet-v2` or `resnet-v2`.
    pub backbone: String,
    pub width: usize,
    pub alpha: f64,
    pub depth: usize,
    pub context: String,
    pub n: usize,
    /// `batch` or `none`.
    pub norm: String,
    /// `conv3x3` or `none`.
    pub post_context: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: "tiny-stub".into(),
            width: 8,
            alpha: 0.25,
            depth: 50,
            context: "SSH".into(),
            n: 16,
            norm: "batch".into(),
            post_context: "conv3x3".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    pub strides: Vec<usize>,
    pub scales: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AnchorSection {
    fn default() -> Self {
        let p = PyramidSpec::default();
        let m = MatchConfig::default();
        Self {
            strides: p.levels.iter().map(|l| l.stride).collect(),
            scales: p.levels.iter().map(|l| l.scale).collect(),
            multipliers: p.scale_multipliers,
            positive_iou: m.positive_iou,
            negative_iou: m.negative_iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Landmark-augmented label file; images are resolved against `root`
    /// (default: the label file's directory).
    pub labels: Option<PathBuf>,
    pub root: Option<PathBuf>,
    /// Generate the training set in memory instead of reading files.
    pub synthetic: Option<SynthConfig>,
    /// Seed of the synthetic set; separate from `run.seed` so repeated runs
    /// train on the same images.
    pub synthetic_seed: u64,
    /// Threads preparing the samples of a batch (results do not depend on
    /// it).
    pub workers: usize,
    /// Side of the square training crops.
    pub crop: usize,
    /// Probability of a horizontal flip per sample.
    pub flip: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            labels: None,
            root: None,
            synthetic: None,
            synthetic_seed: 0,
            workers: 1,
            crop: 640,
            flip: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub warmup_factor: f64,
    pub decay_epochs: Vec<f64>,
    pub decay_factor: f64,
    pub epochs: f64,
    /// Multiply every epoch boundary so the schedule ends at this epoch.
    pub scale_to: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        Self {
            base_lr: s.base_lr,
            warmup_epochs: s.warmup_epochs,
            warmup_factor: s.warmup_factor,
            decay_epochs: s.decay_epochs,
            decay_factor: s.decay_factor,
            epochs: s.final_epoch,
            scale_to: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_per_device: usize,
    /// `global` or `per-device`.
    pub lr_scaling: String,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerSpec::default();
        Self {
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            batch_per_device: o.batch_per_device,
            lr_scaling: "global".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_box: f64,
    pub lambda_landmark: f64,
    pub smooth_l1_beta: f64,
    /// `cross-entropy` or `focal`.
    pub class_loss: String,
    pub focal_gamma: f64,
    pub focal_weight_pos: f64,
    pub focal_weight_neg: f64,
    pub neg_pos_ratio: usize,
    pub min_negatives: usize,
    /// `per-image` or `per-batch`.
    pub ohem_scope: String,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            lambda_box: l.lambda_box,
            lambda_landmark: l.lambda_landmark,
            smooth_l1_beta: l.smooth_l1_beta,
            class_loss: "cross-entropy".into(),
            focal_gamma: 2.0,
            focal_weight_pos: 0.25,
            focal_weight_neg: 0.75,
            neg_pos_ratio: l.ohem.neg_pos_ratio,
            min_negatives: l.ohem.min_negatives,
            ohem_scope: "per-image".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub score_threshold: f64,
    pub min_height: f64,
    pub nms_iou: f64,
    pub vote_iou: f64,
    /// `iou` or `score-iou`.
    pub vote_weight: String,
}

impl Default for TtaSection {
    fn default() -> Self {
        let t = TtaConfig::default();
        Self {
            scales: t.scales,
            flip: t.flip,
            score_threshold: t.decode.score_threshold,
            min_height: t.decode.min_height,
            nms_iou: t.nms_iou,
            vote_iou: t.vote_iou,
            vote_weight: "iou".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Label file used as ground truth (sets assigned by face height).
    pub labels: Option<PathBuf>,
    pub root: Option<PathBuf>,
    /// Official WIDER FACE ground truth (`.txt` or `.mat`) and set lists.
    pub wider_gt: Option<PathBuf>,
    pub wider_sets: Option<[PathBuf; 3]>,
    /// Face heights (px) from which a face also counts as medium / easy when
    /// no official lists exist.
    pub medium_min_height: f64,
    pub easy_min_height: f64,
    pub iou: f64,
    /// Landmark benchmark directory and its kind (`afw` or `aflw2000`).
    pub landmark_dir: Option<PathBuf>,
    pub landmark_dataset: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            labels: None,
            root: None,
            wider_gt: None,
            wider_sets: None,
            medium_min_height: 24.0,
            easy_min_height: 40.0,
            iou: 0.5,
            landmark_dir: None,
            landmark_dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub anchors: AnchorSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub tta: TtaSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{field}`: {msg}"))
}

impl RunConfig {
    /// A config with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            run: RunSection {
                seed,
                output: None,
                devices: 1,
                select_best: false,
            },
            model: Default::default(),
            anchors: Default::default(),
            data: Default::default(),
            schedule: Default::default(),
            optimizer: Default::default(),
            loss: Default::default(),
            tta: Default::default(),
            eval: Default::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        // name the missing required field precisely
        match table.get("run") {
            None => return Err(config_err("run.seed", "missing required field")),
            Some(toml::Value::Table(t)) if !t.contains_key("seed") => {
                return Err(config_err("run.seed", "missing required field"))
            }
            _ => {}
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::Config(match e.span() {
                Some(span) => {
                    let line = text[..span.start].lines().count().max(1);
                    format!("line {line}: {msg}")
                }
                None => msg,
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    /// Reads `path` (or starts from an empty file), applies `key=value`
    /// overrides (`model.context=RSSH`; values are TOML, bare words are taken
    /// as strings) and resolves relative paths against the file's directory,
    /// or the working directory without a file.
    pub fn load_with(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = Self::from_toml(&toml::to_string(&table).expect("table serializes"))?;
        let base = match path.and_then(Path::parent) {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let base = std::fs::canonicalize(&base).map_err(|e| Error::io(&base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.run.output);
        fix(&mut self.data.labels);
        fix(&mut self.data.root);
        fix(&mut self.eval.labels);
        fix(&mut self.eval.root);
        fix(&mut self.eval.wider_gt);
        fix(&mut self.eval.landmark_dir);
        if let Some(sets) = &mut self.eval.wider_sets {
            for x in sets.iter_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        }
    }

    /// Fully resolved TOML (every default written out).
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Short digest of the snapshot, used to tag artifacts.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.snapshot().as_bytes())[..8])
    }

    /// Digest of the architecture-defining parts only.
    pub fn model_hash(&self) -> String {
        let s = format!("{:?}|{:?}", self.model, self.anchors);
        hex(&Sha256::digest(s.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?.validate().map_err(|e| config_err("model", e))?;
        self.schedule_spec()?.validate().map_err(|e| config_err("schedule", e))?;
        self.optimizer_spec()?.validate().map_err(|e| config_err("optimizer", e))?;
        self.loss_config()?;
        self.tta_config()?;
        if self.data.workers == 0 {
            return Err(config_err("data.workers", "must be positive"));
        }
        if self.run.devices == 0 {
            return Err(config_err("run.devices", "must be positive"));
        }
        if self.data.crop == 0 {
            return Err(config_err("data.crop", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.data.flip) {
            return Err(config_err("data.flip", "must be a probability"));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        if let Some(d) = &self.eval.landmark_dataset {
            crate::points::parse_landmark_dataset(d).ok_or_else(|| {
                config_err("eval.landmark_dataset", format!("unknown dataset {d:?} (afw, aflw2000)"))
            })?;
        }
        Ok(())
    }

    pub fn pyramid(&self) -> Result<PyramidSpec> {
        let a = &self.anchors;
        if a.strides.len() != a.scales.len() {
            return Err(config_err("anchors.scales", "needs one scale per stride"));
        }
        let p = PyramidSpec {
            levels: a
                .strides
                .iter()
                .zip(&a.scales)
                .map(|(&stride, &scale)| PyramidLevel { stride, scale })
                .collect(),
            scale_multipliers: a.multipliers.clone(),
        };
        p.validate().map_err(|e| config_err("anchors", e))?;
        Ok(p)
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            positive_iou: self.anchors.positive_iou,
            negative_iou: self.anchors.negative_iou,
            ..MatchConfig::default()
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let backbone = match m.backbone.as_str() {
            "tiny-stub" => BackboneSpec::TinyStub { width: m.width },
            "mobilenet-v2" => BackboneSpec::MobileNetV2 { alpha: m.alpha },
            "resnet-v2" => BackboneSpec::ResNetV2 { depth: m.depth },
            other => {
                return Err(config_err(
                    "model.backbone",
                    format!("unknown backbone {other:?} (tiny-stub, mobilenet-v2, resnet-v2)"),
                ))
            }
        };
        let variant = ContextVariant::parse(&m.context).ok_or_else(|| {
            config_err("model.context", format!("unknown context module {:?}", m.context))
        })?;
        let norm = match m.norm.as_str() {
            "batch" => NormKind::Batch,
            "none" => NormKind::None,
            other => return Err(config_err("model.norm", format!("{other:?} (batch, none)"))),
        };
        let post_context = match m.post_context.as_str() {
            "conv3x3" => PostContext::Conv3x3,
            "none" => PostContext::None,
            other => {
                return Err(config_err("model.post_context", format!("{other:?} (conv3x3, none)")))
            }
        };
        Ok(ModelSpec {
            backbone,
            pyramid: self.pyramid()?,
            context: ContextModuleSpec::new(variant, m.n),
            norm,
            post_context,
        })
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        let s = &self.schedule;
        let spec = ScheduleSpec {
            base_lr: s.base_lr,
            warmup_epochs: s.warmup_epochs,
            warmup_factor: s.warmup_factor,
            decay_epochs: s.decay_epochs.clone(),
            decay_factor: s.decay_factor,
            final_epoch: s.epochs,
        };
        Ok(match s.scale_to {
            Some(0) => return Err(config_err("schedule.scale_to", "must be positive")),
            Some(e) => spec.scaled(e as f64 / s.epochs),
            None => spec,
        })
    }

    pub fn optimizer_spec(&self) -> Result<OptimizerSpec> {
        let o = &self.optimizer;
        let lr_scaling = match o.lr_scaling.as_str() {
            "global" => LrScaling::Global,
            "per-device" => LrScaling::PerDevice,
            other => {
                return Err(config_err("optimizer.lr_scaling", format!("{other:?} (global, per-device)")))
            }
        };
        Ok(OptimizerSpec {
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            batch_per_device: o.batch_per_device,
            devices: self.run.devices,
            lr_scaling,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let l = &self.loss;
        let class_loss = match l.class_loss.as_str() {
            "cross-entropy" => ClassLoss::CrossEntropy,
            "focal" => ClassLoss::Focal {
                gamma: l.focal_gamma,
                weight_pos: l.focal_weight_pos,
                weight_neg: l.focal_weight_neg,
            },
            other => {
                return Err(config_err("loss.class_loss", format!("{other:?} (cross-entropy, focal)")))
            }
        };
        let scope = match l.ohem_scope.as_str() {
            "per-image" => OhemScope::PerImage,
            "per-batch" => OhemScope::PerBatch,
            other => return Err(config_err("loss.ohem_scope", format!("{other:?} (per-image, per-batch)"))),
        };
        Ok(LossConfig {
            lambda_box: l.lambda_box,
            lambda_landmark: l.lambda_landmark,
            smooth_l1_beta: l.smooth_l1_beta,
            class_loss,
            ohem: OhemConfig {
                neg_pos_ratio: l.neg_pos_ratio,
                min_negatives: l.min_negatives,
                scope,
            },
        })
    }

    pub fn tta_config(&self) -> Result<TtaConfig> {
        let t = &self.tta;
        if t.scales.is_empty() || t.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(config_err("tta.scales", "needs at least one positive scale"));
        }
        let vote_weight = match t.vote_weight.as_str() {
            "iou" => VoteWeight::Iou,
            "score-iou" => VoteWeight::ScoreIou,
            other => return Err(config_err("tta.vote_weight", format!("{other:?} (iou, score-iou)"))),
        };
        Ok(TtaConfig {
            scales: t.scales.clone(),
            flip: t.flip,
            decode: DecodeConfig {
                score_threshold: t.score_threshold,
                min_height: t.min_height,
                max_candidates: None,
            },
            nms_iou: t.nms_iou,
            vote_iou: t.vote_iou,
            vote_weight,
            ..TtaConfig::default()
        })
    }
}

/// Sets `section.key = value` in a parsed file.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_err(key, "empty key"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{p}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml("[run]\nseed = 3\n").unwrap();
        assert_eq!(c, RunConfig::with_seed(3));
        assert_eq!(c.model_spec().unwrap().anchors_per_cell(), 3);
        let again = RunConfig::from_toml(&c.snapshot()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_seed_is_named() {
        for text in ["", "[model]\nn = 16\n", "[run]\ndevices = 2\n"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert!(e.is_config());
            assert!(e.to_string().contains("run.seed"), "{e}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("[run]\nseed = 1\n[model]\nfilters = 3\n").unwrap_err();
        assert!(e.to_string().contains("filters"), "{e}");
        assert!(RunConfig::from_toml("[run]\nseed = 1\n[extra]\n").is_err());
    }

    #[test]
    fn bad_values_name_their_field() {
        let e = RunConfig::from_toml("[run]\nseed = 1\n[model]\ncontext = \"Foo\"\n").unwrap_err();
        assert!(e.to_string().contains("model.context"));
        let e = RunConfig::from_toml("[run]\nseed = 1\n[model]\nn = 12\n").unwrap_err();
        assert!(e.to_string().contains("model"));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut t: toml::Table = "[run]\nseed = 1\n[model]\nn = 32\n".parse().unwrap();
        apply_override(&mut t, "model.n=64").unwrap();
        apply_override(&mut t, "model.context=RSSH").unwrap();
        apply_override(&mut t, "tta.scales=[1.0]").unwrap();
        let c = RunConfig::from_toml(&toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(c.model.n, 64);
        assert_eq!(c.model.context, "RSSH");
        assert_eq!(c.tta.scales, vec![1.0]);
        assert!(apply_override(&mut t, "run.seed").is_err());
    }

    #[test]
    fn scaled_schedule() {
        let c = RunConfig::from_toml("[run]\nseed = 1\n[schedule]\nscale_to = 30\n").unwrap();
        let s = c.schedule_spec().unwrap();
        assert_eq!(s.final_epoch, 30.0);
        assert!((s.lr_at(50.0 / 3.0).unwrap() - 1e-3).abs() < 1e-15);
    }
}
