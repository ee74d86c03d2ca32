use std::path::{Path, PathBuf};

use facedet::checkpoint::Checkpoint;
use facedet::config::RunConfig;
use facedet::dataset::training_set;
use facedet::synth::SynthConfig;
use facedet::trainer::{read_log, run_training, RunLayout, StepRecord, Trainer};

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path).unwrap()
}

/// A few seconds of training: 6 tiny images, 4 epochs.
fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.model.width = 8;
    cfg.model.n = 16;
    cfg.data.crop = 64;
    cfg.data.synthetic = Some(SynthConfig {
        images: 6,
        width: 80,
        height: 72,
        faces_min: 1,
        faces_max: 2,
        face_min: 14,
        face_max: 30,
    });
    cfg.optimizer.batch_per_device = 2;
    cfg.schedule.scale_to = Some(4);
    cfg.tta.scales = vec![1.0];
    cfg
}

fn records(t: &mut Trainer, epochs: usize) -> Vec<StepRecord> {
    let mut out = Vec::new();
    for _ in 0..epochs {
        t.train_epoch(&mut |r| {
            out.push(r.clone());
            Ok(())
        })
        .unwrap();
    }
    out
}

#[test]
fn same_seed_same_first_steps() {
    let cfg = desk_config();
    let data = training_set(&cfg).unwrap();
    let mut a = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut b = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    // one epoch is 50 steps; compare the first ten
    a.train_epoch(&mut |r| {
        ra.push(r.clone());
        Ok(())
    })
    .unwrap();
    b.train_epoch(&mut |r| {
        rb.push(r.clone());
        Ok(())
    })
    .unwrap();
    for (x, y) in ra.iter().zip(&rb).take(10) {
        assert_eq!(x.step, y.step);
        assert!((x.total - y.total).abs() <= 1e-6, "{} vs {}", x.total, y.total);
        assert!((x.lr - y.lr).abs() <= 1e-12);
    }

    let mut c = Trainer::new(desk_config_with_seed(2), data).unwrap();
    let rc = records(&mut c, 1);
    assert!(ra.iter().zip(&rc).take(10).any(|(x, y)| x.total != y.total));
}

fn desk_config_with_seed(seed: u64) -> RunConfig {
    let mut cfg = desk_config();
    cfg.run.seed = seed;
    cfg
}

/// Loss averaged over consecutive 10-step windows falls across the first
/// 100 steps of the desk run.
#[test]
fn smoothed_loss_decreases_early() {
    let cfg = desk_config();
    let data = training_set(&cfg).unwrap();
    let mut t = Trainer::new(cfg, data).unwrap();
    let r = records(&mut t, 2);
    assert_eq!(r.len(), 100);
    let means: Vec<f64> = r.chunks(10).map(|c| c.iter().map(|x| x.total).sum::<f64>() / 10.0).collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "windowed losses {means:?}");
    }
}

#[test]
fn resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(4);
    let data = training_set(&cfg).unwrap();
    let full = RunLayout::new(dir.path().join("full"));
    let done = run_training(cfg.clone(), data.clone(), &full, None, &mut |_| Ok(None), &mut |_| {}).unwrap();
    assert_eq!(done.epoch(), 4);
    let full_log = read_log(&full.log()).unwrap();
    assert_eq!(full_log.len(), 4 * 3);

    // restart a copy of the run from its epoch-2 checkpoint
    let part = RunLayout::new(dir.path().join("part"));
    copy_dir(&full.root, &part.root);
    let ckpt = Checkpoint::load(&part.epoch_checkpoint(2)).unwrap();
    assert_eq!((ckpt.meta.epoch, ckpt.meta.step), (2, 6));
    let resumed = run_training(cfg, data, &part, Some(&ckpt), &mut |_| Ok(None), &mut |_| {}).unwrap();
    assert_eq!(read_log(&part.log()).unwrap(), full_log);
    for ((_, a), (_, b)) in done.model().params().iter().zip(resumed.model().params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(
        Checkpoint::load(&full.epoch_checkpoint(4)).unwrap(),
        Checkpoint::load(&part.epoch_checkpoint(4)).unwrap()
    );
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst: PathBuf = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            std::fs::copy(e.path(), dst).unwrap();
        }
    }
}

#[test]
fn resume_rejects_another_architecture() {
    let cfg = small_config(1);
    let data = training_set(&cfg).unwrap();
    let t = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let ckpt = t.checkpoint();
    let mut other = cfg;
    other.model.n = 32;
    assert!(Trainer::resume(other, data, &ckpt).is_err());
}

#[test]
fn crops_and_flips_depend_only_on_seed_epoch_and_index() {
    let cfg = small_config(9);
    let data = training_set(&cfg).unwrap();
    let t = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let u = Trainer::new(cfg, data).unwrap();
    assert_eq!(t.epoch_order(3), u.epoch_order(3));
    assert_ne!(t.epoch_order(0), t.epoch_order(1));
    let mut sorted = t.epoch_order(0);
    sorted.sort();
    assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    for i in 0..6 {
        assert_eq!(t.sample(2, i).unwrap(), u.sample(2, i).unwrap());
    }
}

#[test]
fn multi_device_batches_scale_the_step() {
    let mut cfg = small_config(3);
    cfg.run.devices = 2;
    cfg.optimizer.batch_per_device = 1;
    let data = training_set(&cfg).unwrap();
    let mut t = Trainer::new(cfg, data).unwrap();
    assert_eq!(t.batch_size(), 2);
    assert_eq!(t.steps_per_epoch(), 3);
    let r = records(&mut t, 1);
    assert_eq!(r.len(), 3);
    assert!(r.iter().all(|x| x.total.is_finite()));
}
