//! Training loop: per-epoch shuffled batches of random crops, synchronous
//! data-parallel SGD under the warmup/step schedule, one checkpoint per
//! epoch and a JSON-lines step log.
//!
//! Randomness: weights from the `init` substream, the epoch's sample order
//! from `order` (indexed by epoch) and each sample's crop and flip from
//! `crop` (indexed by epoch * N + sample). Nothing else carries state, so a
//! resumed run replays exactly the batches an uninterrupted one would see.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use facedet_core::anchors::{build_anchors, match_anchors, AnchorGrid, MatchConfig, MatchResult};
use facedet_core::annotation::Face;
use facedet_core::image::{to_batch, Normalization};
use facedet_core::loss::{LossBreakdown, LossConfig};
use facedet_core::model::Detector;
use facedet_core::optim::{OptimizerSpec, ScheduleSpec, Sgd};
use facedet_core::rng::{indexed_seed, substream_seed, CROP, INIT, ORDER};
use facedet_core::train::data_parallel_gradients;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{flip_sample, random_crop, Sample};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Fractional epoch at which the step's learning rate was taken.
    pub epoch: f64,
    pub lr: f64,
    pub cls: f64,
    pub bbox: f64,
    pub landmark: f64,
    pub total: f64,
    pub n_cls: f64,
    pub n_reg: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl StepRecord {
    fn new(step: u64, epoch: f64, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            lr,
            cls: b.cls,
            bbox: b.bbox,
            landmark: b.landmark,
            total: b.total,
            n_cls: b.n_cls,
            n_reg: b.n_reg,
            positives: b.positives,
            negatives: b.negatives,
        }
    }
}

pub struct Trainer {
    cfg: RunConfig,
    model: Detector,
    sgd: Sgd,
    schedule: ScheduleSpec,
    optimizer: OptimizerSpec,
    loss: LossConfig,
    matching: MatchConfig,
    grid: AnchorGrid,
    norm: Normalization,
    data: Dataset,
    /// Where a diverging batch is described before aborting.
    pub diagnostics_dir: Option<PathBuf>,
    epoch: usize,
    step: u64,
}

impl Trainer {
    /// A freshly initialized model.
    pub fn new(cfg: RunConfig, data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let spec = cfg.model_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.run.seed, INIT));
        let model = Detector::new(spec.clone(), &mut rng)?;
        let o = cfg.optimizer_spec()?;
        let sgd = Sgd::new(model.params(), o.momentum, o.weight_decay);
        let crop = cfg.data.crop;
        Ok(Self {
            schedule: cfg.schedule_spec()?,
            optimizer: o,
            loss: cfg.loss_config()?,
            matching: cfg.match_config(),
            grid: build_anchors(&spec.pyramid, crop, crop)?,
            norm: Normalization::default(),
            cfg,
            model,
            sgd,
            data,
            diagnostics_dir: None,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by a run of the same model.
    pub fn resume(cfg: RunConfig, data: Dataset, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        if ckpt.meta.model_hash != t.cfg.model_hash() {
            return Err(Error::Config(
                "checkpoint was written for a different model or anchor configuration".into(),
            ));
        }
        ckpt.restore_model(&mut t.model)?;
        t.sgd.set_velocity(ckpt.velocity(&t.model)?)?;
        t.epoch = ckpt.meta.epoch;
        t.step = ckpt.meta.step;
        Ok(t)
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Detector {
        &mut self.model
    }

    pub fn into_model(self) -> Detector {
        self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.final_epoch.ceil() as usize
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    pub fn batch_size(&self) -> usize {
        self.optimizer.effective_batch()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size())
    }

    /// Sample order of `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(self.cfg.run.seed, ORDER, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// The augmented training sample of item `index` in `epoch`.
    pub fn sample(&self, epoch: usize, index: usize) -> Result<Sample> {
        let key = (epoch * self.data.len() + index) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(self.cfg.run.seed, CROP, key));
        let image = self.data.image(index)?;
        let s = random_crop(&image, &self.data.annotations[index].faces, self.cfg.data.crop, &mut rng);
        Ok(if rng.gen::<f64>() < self.cfg.data.flip {
            flip_sample(&s)
        } else {
            s
        })
    }

    fn samples(&self, epoch: usize, indices: &[usize]) -> Result<Vec<Sample>> {
        let workers = self.cfg.data.workers.min(indices.len()).max(1);
        if workers == 1 {
            return indices.iter().map(|&i| self.sample(epoch, i)).collect();
        }
        let chunk = indices.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&i| self.sample(epoch, i)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(indices.len());
            for h in handles {
                out.extend(h.join().expect("sample worker panicked")?);
            }
            Ok(out)
        })
    }

    fn targets(&self, faces: &[Face]) -> Result<MatchResult> {
        Ok(match_anchors(&self.grid, faces, &self.matching)?)
    }

    /// Runs one epoch, handing each step's record to `on_step`.
    pub fn train_epoch(&mut self, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let epoch = self.epoch;
        let order = self.epoch_order(epoch);
        let batch = self.batch_size();
        let steps = self.steps_per_epoch();
        for (i, indices) in order.chunks(batch).enumerate() {
            let at = epoch as f64 + i as f64 / steps as f64;
            let lr = self.optimizer.applied_lr(self.schedule.lr_at(at.min(self.schedule.final_epoch))?);
            let samples = self.samples(epoch, indices)?;
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let tensor = to_batch(&images, &self.norm)?;
            let matches = samples
                .iter()
                .map(|s| self.targets(&s.faces))
                .collect::<Result<Vec<_>>>()?;
            let (breakdown, grads) =
                data_parallel_gradients(&mut self.model, &tensor, &matches, &self.loss, self.cfg.run.devices)?;
            let record = StepRecord::new(self.step + 1, at, lr, &breakdown);
            if !breakdown.total.is_finite() || !grads.all_finite() {
                return Err(self.diverged(&record, epoch, indices));
            }
            self.sgd.step(self.model.params_mut(), &grads, lr);
            self.step += 1;
            on_step(&record)?;
        }
        self.epoch += 1;
        Ok(())
    }

    fn diverged(&self, record: &StepRecord, epoch: usize, indices: &[usize]) -> Error {
        let images: Vec<&str> = indices.iter().map(|&i| self.data.annotations[i].image.as_str()).collect();
        let dump = serde_json::json!({
            "step": record.step,
            "epoch": epoch,
            "batch_indices": indices,
            "images": images,
            "loss": record,
        });
        let mut msg = format!(
            "non-finite loss or gradient at step {} (epoch {epoch}, batch indices {indices:?})",
            record.step
        );
        if let Some(dir) = &self.diagnostics_dir {
            let path = dir.join("nonfinite_batch.json");
            if std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()).is_ok() {
                msg.push_str(&format!("; batch written to {}", path.display()));
            }
        }
        Error::NonFinite(msg)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            model_hash: self.cfg.model_hash(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.run.seed,
            epoch: self.epoch,
            step: self.step,
            model: self.model.describe(),
            config: self.cfg.snapshot(),
        };
        Checkpoint::capture(meta, &self.model, Some(&self.sgd))
    }
}

/// Where `run_training` puts things.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:03}.ckpt"))
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }

    /// Creates the directories.
    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.reports()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Newest epoch checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let mut found: Vec<PathBuf> = std::fs::read_dir(self.checkpoints())
            .ok()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
            })
            .collect();
        found.sort();
        found.pop()
    }
}

/// Reads the step records of a log, skipping the leading config record.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with("{\"config\"") {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Config record opening every log.
fn config_record(cfg: &RunConfig) -> String {
    serde_json::json!({ "config": cfg.snapshot(), "config_hash": cfg.hash() }).to_string()
}

/// Per-epoch hook of [`run_training`]; returns a validation score when it
/// evaluated the model (used for best-checkpoint selection).
pub type EpochHook<'a> = dyn FnMut(&mut Trainer) -> Result<Option<f64>> + 'a;

/// Trains to the end of the schedule inside `layout`, resuming from
/// `resume` when given. Returns the trainer at the end of training.
pub fn run_training(
    cfg: RunConfig,
    data: Dataset,
    layout: &RunLayout,
    resume: Option<&Checkpoint>,
    on_epoch: &mut EpochHook<'_>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<Trainer> {
    layout.create()?;
    let snapshot = layout.snapshot();
    std::fs::write(&snapshot, cfg.snapshot()).map_err(|e| Error::io(&snapshot, e))?;
    let mut trainer = match resume {
        Some(c) => Trainer::resume(cfg, data, c)?,
        None => Trainer::new(cfg, data)?,
    };
    trainer.diagnostics_dir = Some(layout.root.clone());

    // a resumed log keeps only the steps the checkpoint already contains
    let log_path = layout.log();
    let kept: Vec<StepRecord> = if resume.is_some() && log_path.exists() {
        read_log(&log_path)?
            .into_iter()
            .filter(|r| r.step <= trainer.step())
            .collect()
    } else {
        Vec::new()
    };
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let write_line = |log: &mut File, line: &str| -> Result<()> {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    write_line(&mut log, &config_record(trainer.config()))?;
    for r in &kept {
        write_line(&mut log, &serde_json::to_string(r).expect("record serializes"))?;
    }

    let mut best = f64::NEG_INFINITY;
    while !trainer.is_finished() {
        trainer.train_epoch(&mut |r| {
            progress(r);
            write_line(&mut log, &serde_json::to_string(r).expect("record serializes"))
        })?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&layout.epoch_checkpoint(trainer.epoch()))?;
        if let Some(score) = on_epoch(&mut trainer)? {
            if score > best {
                best = score;
                ckpt.save(&layout.best_checkpoint())?;
            }
        }
    }
    Ok(trainer)
}

/// A model restored from a checkpoint, with the configuration it was
/// trained under.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, Detector)> {
    let cfg = RunConfig::from_toml(&ckpt.meta.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Detector::new(cfg.model_spec()?, &mut rng)?;
    ckpt.restore_model(&mut model)?;
    Ok((cfg, model))
}
