//! The `facedet` command line.
//!
//! Configuration precedence: `--set section.key=value` and dedicated flags
//! (`--seed`, `--output`) > the `--config` file > built-in defaults.
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use facedet_core::annotation::{Annotation, Difficulty};
use facedet_core::eval::{landmark_mae, LandmarkProtocol};
use facedet_core::model::{ContextVariant, Detector};
use facedet_core::rng::{indexed_seed, substream_seed, INIT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{evaluation_set, landmark_set, training_set, Dataset};
use crate::dump::{read_dumps, write_dump};
use crate::error::{Error, Result};
use crate::labels::read_label_file;
use crate::report::{detect_all, evaluate, landmark_json, write_evaluation, write_experiment, write_json, Evaluation};
use crate::synth::write_synth_dataset;
use crate::trainer::{load_model, run_training, RunLayout, Trainer};
use crate::wider::{assign_sets_by_height, load_official};

#[derive(Debug, Parser)]
#[command(name = "facedet", version, about = "Single-stage face detector with landmark regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set model.context=RSSH`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("run.seed={s}"));
        }
        o.extend_from_slice(extra);
        RunConfig::load_with(self.config.as_deref(), &o)
    }

    /// Like `load`, but commands that draw no random numbers do not need a
    /// seed.
    fn load_unseeded(&self) -> Result<RunConfig> {
        let needs_default = match &self.config {
            Some(p) => {
                // an unreadable file is reported by `load`
                let Ok(text) = std::fs::read_to_string(p) else {
                    return self.load(&[]);
                };
                !text.parse::<toml::Table>().is_ok_and(|t| {
                    t.get("run").and_then(|r| r.as_table()).is_some_and(|r| r.contains_key("seed"))
                })
            }
            None => true,
        };
        let has_seed = self.seed.is_some() || self.overrides.iter().any(|o| o.trim_start().starts_with("run.seed"));
        if needs_default && !has_seed {
            self.load(&["run.seed=0".to_string()])
        } else {
            self.load(&[])
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct OutputArgs {
    /// Output directory (overrides `run.output`).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long, conflicts_with = "resume_from")]
        resume: bool,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume_from: Option<PathBuf>,
        /// Skip the evaluation after training.
        #[arg(long)]
        no_eval: bool,
        /// Print every step record.
        #[arg(long)]
        verbose: bool,
    },
    /// Write detection dumps for a set of images.
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Trained model (`checkpoints/epoch_NNN.ckpt`). Its TTA settings apply
        /// unless `-c`/`--set` supply new ones.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image directory (searched recursively for .jpg/.jpeg/.png).
        #[arg(long)]
        images: PathBuf,
        /// Restrict to the images of this label file (paths relative to
        /// `--images`).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score detection dumps against ground truth.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Directory of detection dumps.
        #[arg(long)]
        dumps: PathBuf,
        /// Ground truth as a label file (sets by face height).
        #[arg(long, conflicts_with = "wider_gt")]
        labels: Option<PathBuf>,
        /// Official WIDER FACE ground truth (`.txt` or `.mat`).
        #[arg(long)]
        wider_gt: Option<PathBuf>,
        /// easy, medium and hard index lists (`wider_*_val.mat`).
        #[arg(long, num_args = 3, value_names = ["EASY", "MEDIUM", "HARD"])]
        wider_sets: Option<Vec<PathBuf>>,
        /// Landmark benchmark directory; its kind comes from `--landmark-dataset`.
        #[arg(long, requires = "landmark_dataset")]
        landmark_dir: Option<PathBuf>,
        /// `afw` or `aflw2000`.
        #[arg(long)]
        landmark_dataset: Option<String>,
    },
    /// Train and evaluate every context variant (and repeats of one) and
    /// report the spread.
    CompareContext {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Comma-separated variants (default: all ten).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Runs of the repeated variant (its first run is shared with the
        /// sweep).
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Variant to repeat (default: the first variant).
        #[arg(long)]
        repeat_variant: Option<String>,
        /// `easy`, `medium` or `hard` AP.
        #[arg(long, default_value = "hard")]
        metric: String,
        /// Sub-runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print trainable parameter counts.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
        /// Emit JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset (images and label file).
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
}

/// Runs the command line and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            resume_from,
            no_eval,
            verbose,
        } => {
            let cfg = with_output(config.load(&[])?, &out)?;
            let dir = cfg.run.output.clone().expect("output set");
            let ckpt = if resume {
                let layout = RunLayout::new(&dir);
                Some(
                    layout
                        .latest_checkpoint()
                        .ok_or_else(|| Error::Config(format!("--resume: no checkpoint under {}", dir.display())))?,
                )
            } else {
                resume_from
            };
            if ckpt.is_none() {
                prepare_output(&dir, out.overwrite)?;
            }
            let ckpt = ckpt.map(|p| Checkpoint::load(&p)).transpose()?;
            let res = cmd_train(cfg, ckpt.as_ref(), !no_eval, verbose);
            if res.is_err() {
                print_log_tail(&RunLayout::new(&dir).log(), 5);
            }
            res.map(|_| ())
        }
        Command::Detect {
            config,
            out,
            checkpoint,
            images,
            labels,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (mut cfg, model) = load_model(&ckpt)?;
            // TTA settings may be overridden at detection time
            let user = config.load_unseeded()?;
            if config.config.is_some() || !config.overrides.is_empty() {
                cfg.tta = user.tta;
            }
            let cfg = with_output(cfg, &out)?;
            let dir = cfg.run.output.clone().expect("output set");
            prepare_output(&dir, out.overwrite)?;
            let names = match labels {
                Some(l) => read_label_file(&l)?.into_iter().map(|a| a.image).collect(),
                None => list_images(&images)?,
            };
            let data = Dataset::on_disk(names.iter().map(Annotation::new).collect(), &images);
            cmd_detect(&cfg, model, &data, &dir).map(|_| ())
        }
        Command::Evaluate {
            config,
            out,
            dumps,
            labels,
            wider_gt,
            wider_sets,
            landmark_dir,
            landmark_dataset,
        } => {
            let mut extra = Vec::new();
            if let Some(l) = labels {
                extra.push(format!("eval.labels={}", toml_path(&l)?));
            }
            if let Some(g) = wider_gt {
                extra.push(format!("eval.wider_gt={}", toml_path(&g)?));
                // dumps are matched by image name; no image decoding needed
                extra.push(format!("eval.root={}", toml_path(Path::new("."))?));
            }
            if let Some(s) = wider_sets {
                let list = s.iter().map(|p| toml_path(p)).collect::<Result<Vec<_>>>()?;
                extra.push(format!("eval.wider_sets=[{}]", list.join(", ")));
            }
            if let Some(d) = landmark_dir {
                extra.push(format!("eval.landmark_dir={}", toml_path(&d)?));
            }
            if let Some(d) = landmark_dataset {
                extra.push(format!("eval.landmark_dataset={}", toml::Value::String(d)));
            }
            let mut c = config.clone();
            c.overrides.extend(extra);
            let cfg = with_output(c.load_unseeded()?, &out)?;
            let dir = cfg.run.output.clone().expect("output set");
            prepare_output(&dir, out.overwrite)?;
            cmd_evaluate(&cfg, &dumps, &dir).map(|_| ())
        }
        Command::CompareContext {
            config,
            out,
            variants,
            repeats,
            repeat_variant,
            metric,
            jobs,
        } => {
            let cfg = with_output(config.load(&[])?, &out)?;
            let dir = cfg.run.output.clone().expect("output set");
            let metric = parse_metric(&metric)?;
            let plan = CompareOptions::new(&variants, repeats, repeat_variant.as_deref(), metric, jobs)?;
            prepare_output(&dir, out.overwrite)?;
            let (_, table) = cmd_compare_context(&cfg, &plan, &dir)?;
            print!("{table}");
            Ok(())
        }
        Command::CountParams { config, json } => {
            let cfg = config.load_unseeded()?;
            let counts = count_params(&cfg)?;
            if json {
                let map: serde_json::Map<_, _> =
                    counts.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect();
                println!("{}", serde_json::Value::Object(map));
            } else {
                for (k, v) in counts {
                    println!("{k:<8} {v}");
                }
            }
            Ok(())
        }
        Command::SynthData { config, out } => {
            let cfg = with_output(config.load_unseeded()?, &out)?;
            let dir = cfg.run.output.clone().expect("output set");
            prepare_output(&dir, out.overwrite)?;
            let s = cfg.data.synthetic.clone().unwrap_or_default();
            s.validate()?;
            let anns = write_synth_dataset(&dir, &s, cfg.data.synthetic_seed)?;
            write_snapshot(&dir, &cfg)?;
            println!(
                "wrote {} images with {} faces to {}",
                anns.len(),
                anns.iter().map(|a| a.faces.len()).sum::<usize>(),
                dir.display()
            );
            Ok(())
        }
    }
}

fn toml_path(p: &Path) -> Result<String> {
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    Ok(toml::Value::String(abs.display().to_string()).to_string())
}

fn with_output(mut cfg: RunConfig, out: &OutputArgs) -> Result<RunConfig> {
    if let Some(o) = &out.output {
        cfg.run.output = Some(std::path::absolute(o).map_err(|e| Error::io(o, e))?);
    }
    if cfg.run.output.is_none() {
        return Err(Error::Config("`run.output`: no output directory (use --output)".into()));
    }
    Ok(cfg)
}

/// Refuses a non-empty existing directory unless `overwrite` is set, in
/// which case it is emptied.
pub fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    if occupied {
        if !overwrite {
            return Err(Error::Config(format!(
                "output directory {} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join("config.snapshot");
    std::fs::write(&p, cfg.snapshot()).map_err(|e| Error::io(&p, e))
}

fn print_log_tail(log: &Path, n: usize) {
    if let Ok(text) = std::fs::read_to_string(log) {
        let lines: Vec<&str> = text.lines().collect();
        eprintln!("last log records ({}):", log.display());
        for l in &lines[lines.len().saturating_sub(n)..] {
            eprintln!("  {l}");
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
            {
                let rel = p.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn parse_metric(s: &str) -> Result<Difficulty> {
    Difficulty::ALL
        .into_iter()
        .find(|d| d.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::Config(format!("--metric: unknown set {s:?} (easy, medium, hard)")))
}

/// Result of `cmd_train`.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub evaluation: Option<Evaluation>,
}

/// Trains inside `cfg.run.output` (which must already be prepared) and
/// evaluates the final model into `reports/`.
pub fn cmd_train(cfg: RunConfig, resume: Option<&Checkpoint>, eval: bool, verbose: bool) -> Result<TrainOutcome> {
    let layout = RunLayout::new(cfg.run.output.clone().ok_or_else(|| Error::Config("`run.output` unset".into()))?);
    let data = training_set(&cfg)?;
    let select_best = cfg.run.select_best;
    let eval_data = if eval || select_best {
        Some(evaluation_set(&cfg)?)
    } else {
        None
    };
    let tta = cfg.tta_config()?;
    let iou = cfg.eval.iou;
    let mut on_epoch = |t: &mut Trainer| -> Result<Option<f64>> {
        match (&eval_data, select_best) {
            (Some(d), true) => {
                let dets = detect_all(t.model_mut(), d, &tta)?;
                Ok(Some(evaluate(&dets, d, iou, "eval")?.hard_ap()))
            }
            _ => Ok(None),
        }
    };
    let mut progress = |r: &crate::trainer::StepRecord| {
        if verbose {
            eprintln!(
                "step {:>6} epoch {:>7.3} lr {:.2e} loss {:.5} (cls {:.5} box {:.5} lmk {:.5})",
                r.step, r.epoch, r.lr, r.total, r.cls, r.bbox, r.landmark
            );
        }
    };
    let mut trainer = run_training(cfg.clone(), data, &layout, resume, &mut on_epoch, &mut progress)?;
    let mut evaluation = None;
    if eval {
        let d = eval_data.as_ref().expect("loaded above");
        let dets = detect_all(trainer.model_mut(), d, &tta)?;
        let e = evaluate(&dets, d, iou, "eval")?;
        write_evaluation(&layout.reports(), &e, &cfg.snapshot())?;
        if let Some((kind, lm)) = landmark_set(&cfg)? {
            let dets = detect_all(trainer.model_mut(), &lm, &tta)?;
            let r = landmark_mae(
                &dets,
                &crate::report::ground_truth(&lm),
                LandmarkProtocol::Matched { iou_threshold: iou },
                kind.name(),
            )?;
            write_json(&layout.reports().join(format!("landmarks_{}.json", kind.name())), &landmark_json(&r))?;
        }
        eprintln!(
            "{}: AP easy {} medium {} hard {}",
            layout.root.display(),
            fmt_ap(e.detection.ap(Difficulty::Easy)),
            fmt_ap(e.detection.ap(Difficulty::Medium)),
            fmt_ap(e.detection.ap(Difficulty::Hard)),
        );
        evaluation = Some(e);
    }
    Ok(TrainOutcome { trainer, evaluation })
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Writes one dump per image under `<dir>/dumps/`.
pub fn cmd_detect(cfg: &RunConfig, mut model: Detector, data: &Dataset, dir: &Path) -> Result<usize> {
    write_snapshot(dir, cfg)?;
    let tta = cfg.tta_config()?;
    let dumps = dir.join("dumps");
    let mut total = 0;
    for i in 0..data.len() {
        let dets = facedet_core::postprocess::tta_detect(&mut model, &data.image(i)?, &tta)?;
        total += dets.len();
        write_dump(&dumps, &data.annotations[i].image, &dets)?;
    }
    Ok(total)
}

/// Scores the dumps in `dumps` against the configured ground truth; reports
/// go to `<dir>/reports/`. The detection part is absent for a
/// landmark-only evaluation.
pub fn cmd_evaluate(cfg: &RunConfig, dumps: &Path, dir: &Path) -> Result<Option<Evaluation>> {
    write_snapshot(dir, cfg)?;
    let reports = dir.join("reports");
    let e = &cfg.eval;
    let mut gt = if let Some(g) = &e.wider_gt {
        let sets = e.wider_sets.as_ref().map(|s| [s[0].as_path(), s[1].as_path(), s[2].as_path()]);
        let mut anns = load_official(g, sets)?;
        if sets.is_none() {
            assign_sets_by_height(&mut anns, e.easy_min_height, e.medium_min_height);
        }
        anns
    } else if let Some(l) = &e.labels {
        let mut anns = read_label_file(l)?;
        assign_sets_by_height(&mut anns, e.easy_min_height, e.medium_min_height);
        anns
    } else if e.landmark_dir.is_some() {
        Vec::new()
    } else {
        return Err(Error::Config(
            "no ground truth: give --labels, --wider-gt or `eval.labels` / `eval.wider_gt`".into(),
        ));
    };
    let mut evaluation = None;
    if !gt.is_empty() {
        let names: Vec<String> = gt.iter().map(|a| a.image.clone()).collect();
        let dets = read_dumps(dumps, &names)?;
        let data = Dataset::on_disk(std::mem::take(&mut gt), PathBuf::new());
        let ev = evaluate(&dets, &data, e.iou, "eval")?;
        write_evaluation(&reports, &ev, &cfg.snapshot())?;
        println!(
            "AP easy {} medium {} hard {}",
            fmt_ap(ev.detection.ap(Difficulty::Easy)),
            fmt_ap(ev.detection.ap(Difficulty::Medium)),
            fmt_ap(ev.detection.ap(Difficulty::Hard))
        );
        evaluation = Some(ev);
    }
    if let Some((kind, lm)) = landmark_set(cfg)? {
        let dets = read_dumps(dumps, &lm.names())?;
        let r = landmark_mae(
            &dets,
            &crate::report::ground_truth(&lm),
            LandmarkProtocol::Matched { iou_threshold: e.iou },
            kind.name(),
        )?;
        write_json(&reports.join(format!("landmarks_{}.json", kind.name())), &landmark_json(&r))?;
        println!("{} landmark mAE {:.4} (miss rate {:.3})", kind.name(), r.mae, r.miss_rate());
    }
    Ok(evaluation)
}

/// What `compare-context` runs.
#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub variants: Vec<ContextVariant>,
    pub repeats: usize,
    pub repeat_variant: ContextVariant,
    pub metric: Difficulty,
    pub jobs: usize,
}

impl CompareOptions {
    pub fn new(
        variants: &[String],
        repeats: usize,
        repeat_variant: Option<&str>,
        metric: Difficulty,
        jobs: usize,
    ) -> Result<Self> {
        let parse = |s: &str| {
            ContextVariant::parse(s.trim()).ok_or_else(|| Error::Config(format!("unknown context variant {s:?}")))
        };
        let variants: Vec<ContextVariant> = if variants.is_empty() {
            ContextVariant::ALL.to_vec()
        } else {
            variants.iter().map(|s| parse(s)).collect::<Result<_>>()?
        };
        if repeats == 0 {
            return Err(Error::Config("--repeats must be at least 1".into()));
        }
        let repeat_variant = match repeat_variant {
            Some(s) => parse(s)?,
            None => variants[0],
        };
        if variants.len() < 2 && repeats < 2 {
            return Err(Error::Config(
                "compare-context needs two variants or --repeats of at least 2".into(),
            ));
        }
        Ok(Self {
            variants,
            repeats,
            repeat_variant,
            metric,
            jobs: jobs.max(1),
        })
    }

    /// (variant, repeat index) of every sub-run, sweep first.
    pub fn runs(&self) -> Vec<(ContextVariant, usize)> {
        let mut runs: Vec<_> = self.variants.iter().map(|&v| (v, 0)).collect();
        if !self.variants.contains(&self.repeat_variant) {
            runs.push((self.repeat_variant, 0));
        }
        runs.extend((1..self.repeats).map(|k| (self.repeat_variant, k)));
        runs
    }
}

/// Seed of repeat `k`; repeat 0 uses the configured seed.
pub fn repeat_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        indexed_seed(seed, "repeat", k as u64)
    }
}

pub fn sub_run_name(v: ContextVariant, k: usize) -> String {
    format!("{}_r{k}", v.name())
}

/// One training sub-run per (variant, repeat) under `<dir>/runs/`, then the
/// aggregate statistics in `<dir>/reports/`.
pub fn cmd_compare_context(
    cfg: &RunConfig,
    plan: &CompareOptions,
    dir: &Path,
) -> Result<(facedet_core::eval::ExperimentStats, String)> {
    write_snapshot(dir, cfg)?;
    let runs = plan.runs();
    let results: Mutex<Vec<Option<f64>>> = Mutex::new(vec![None; runs.len()]);
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= runs.len() || failure.lock().expect("lock").is_some() {
            return;
        }
        let (v, k) = runs[i];
        let mut sub = cfg.clone();
        sub.model.context = v.name().to_string();
        sub.run.seed = repeat_seed(cfg.run.seed, k);
        sub.run.select_best = false;
        sub.run.output = Some(dir.join("runs").join(sub_run_name(v, k)));
        let res = cmd_train(sub, None, true, false).map(|o| {
            o.evaluation
                .and_then(|e| e.detection.ap(plan.metric))
                .unwrap_or(0.0)
        });
        match res {
            Ok(ap) => results.lock().expect("lock")[i] = Some(ap),
            Err(e) => {
                failure.lock().expect("lock").get_or_insert(e);
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 0..plan.jobs.min(runs.len()) {
            s.spawn(worker);
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let results: Vec<f64> = results.into_inner().expect("lock").into_iter().map(|r| r.expect("run finished")).collect();
    let variants: Vec<(String, Vec<f64>)> = plan
        .variants
        .iter()
        .map(|&v| {
            let i = runs.iter().position(|&r| r == (v, 0)).expect("sweep run");
            (v.name().to_string(), vec![results[i]])
        })
        .collect();
    let repeats = (plan.repeats >= 2).then(|| {
        let values = runs
            .iter()
            .zip(&results)
            .filter(|((v, _), _)| *v == plan.repeat_variant)
            .map(|(_, &ap)| ap)
            .collect();
        (plan.repeat_variant.name().to_string(), values)
    });
    let metric = format!("{} AP", plan.metric.name());
    let stats = write_experiment(&dir.join("reports"), &variants, repeats, &metric, &cfg.snapshot())?;
    let table = stats.table(&metric, 100.0);
    Ok((stats, table))
}

/// Trainable parameters in total and per component.
pub fn count_params(cfg: &RunConfig) -> Result<Vec<(&'static str, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.run.seed, INIT));
    let model = Detector::new(cfg.model_spec()?, &mut rng)?;
    let mut out = vec![("total", model.num_parameters())];
    for part in ["backbone", "fpn", "context", "post", "head"] {
        out.push((part, model.num_parameters_in(part)));
    }
    Ok(out)
}
