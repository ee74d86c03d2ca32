use std::path::Path;
use std::process::{Command, Output};

use facedet::dump::write_dump;
use facedet::labels::read_label_file;
use facedet_core::postprocess::{Detection, TtaSource};
use serde_json::Value;

const TINY: &str = r#"
[run]
seed = 3

[model]
width = 8
n = 16
norm = "none"

[data]
crop = 64

[data.synthetic]
images = 4
width = 64
height = 64
faces_min = 1
faces_max = 2
face_min = 14
face_max = 30

[schedule]
scale_to = 2

[optimizer]
batch_per_device = 2

[tta]
scales = [1.0]
flip = false
"#;

fn facedet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facedet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &TINY.replace("seed = 3", ""));
    let out = dir.path().join("out");
    let o = facedet(&["train", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("run.seed"), "{}", stderr(&o));
    assert!(!out.exists());

    // --seed supplies it
    let o = facedet(&["count-params", "-c", &cfg, "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bad_configs_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &TINY.replace("width = 8", "width = 8\nwidht = 3"));
    let o = facedet(&["train", "-c", &cfg, "-o", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));

    let cfg = write(dir.path(), "d.toml", TINY);
    let o = facedet(&["count-params", "-c", &cfg, "--set", "model.context=Nope"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.context"), "{}", stderr(&o));

    let o = facedet(&["count-params", "-c", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let o = facedet(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn existing_output_is_refused_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let o = facedet(&["train", "-c", &cfg, "-o", out.to_str().unwrap(), "--no-eval"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--overwrite"), "{}", stderr(&o));
    assert!(out.join("keep.txt").exists());

    let o = facedet(&["train", "-c", &cfg, "-o", out.to_str().unwrap(), "--no-eval", "--overwrite"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!out.join("keep.txt").exists());
    assert!(out.join("checkpoints/epoch_002.ckpt").exists());
    assert!(out.join("config.snapshot").exists());
}

#[test]
fn synth_train_detect_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let data = dir.path().join("data");
    let o = facedet(&["synth-data", "-c", &cfg, "-o", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels = data.join("label.txt");
    let anns = read_label_file(&labels).unwrap();
    assert_eq!(anns.len(), 4);

    let run = dir.path().join("run");
    let o = facedet(&["train", "-c", &cfg, "-o", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&run.join("reports/eval.json"));
    assert!(report["detection"]["sets"]["hard"]["ap"].is_number());
    assert!(run.join("reports/pr_hard.csv").exists());
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("{\"config\""));
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    let dets = dir.path().join("dets");
    let o = facedet(&[
        "detect",
        "--checkpoint",
        run.join("checkpoints/epoch_002.ckpt").to_str().unwrap(),
        "--images",
        data.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "-o",
        dets.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for a in &anns {
        assert!(dets.join("dumps").join(Path::new(&a.image).with_extension("txt")).exists());
    }

    let ev = dir.path().join("ev");
    let o = facedet(&[
        "evaluate",
        "--dumps",
        dets.join("dumps").to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "-o",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = json(&ev.join("reports/eval.json"));
    let b = json(&run.join("reports/eval.json"));
    // the same model on the same images scores the same
    assert_eq!(a["detection"], b["detection"]);
}

#[test]
fn ground_truth_dumps_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let data = dir.path().join("data");
    assert_eq!(code(&facedet(&["synth-data", "-c", &cfg, "-o", data.to_str().unwrap()])), 0);
    let labels = data.join("label.txt");
    let dumps = dir.path().join("dumps");
    for a in read_label_file(&labels).unwrap() {
        let dets: Vec<Detection> = a
            .faces
            .iter()
            .map(|f| Detection {
                bbox: f.bbox,
                landmarks: f.landmarks.unwrap(),
                score: 1.0,
                source: TtaSource::default(),
            })
            .collect();
        write_dump(&dumps, &a.image, &dets).unwrap();
    }
    let ev = dir.path().join("ev");
    let o = facedet(&[
        "evaluate",
        "--dumps",
        dumps.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "-o",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&ev.join("reports/eval.json"));
    for set in ["easy", "medium", "hard"] {
        let s = &r["detection"]["sets"][set];
        if s["num_gt"].as_u64().unwrap() > 0 {
            assert_eq!(s["ap"].as_f64().unwrap(), 1.0, "{set}");
        }
    }
    assert_eq!(r["landmarks"]["mae"].as_f64().unwrap(), 0.0);
    assert_eq!(r["landmarks"]["misses"].as_u64().unwrap(), 0);
}

#[test]
fn compare_context_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TINY);
    let out = dir.path().join("cmp");
    let o = facedet(&[
        "compare-context",
        "-c",
        &cfg,
        "-o",
        out.to_str().unwrap(),
        "--variants",
        "Basic1",
        "--repeats",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in 0..3 {
        assert!(out.join(format!("runs/Basic1_r{k}/reports/eval.json")).exists());
    }
    let stats = json(&out.join("reports/stats.json"));
    let values = stats["repeat"]["values"].as_array().unwrap();
    assert_eq!(values.len(), 3);
    let v: Vec<f64> = values.iter().map(|x| x.as_f64().unwrap()).collect();
    let mean = v.iter().sum::<f64>() / 3.0;
    assert!((stats["repeat"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    // repeat 0 is the sweep run itself
    assert_eq!(stats["variants"][0]["metric"].as_f64().unwrap(), v[0]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Basic1"));
    assert!(out.join("reports/table.txt").exists());

    // one variant and no repeats has no spread to report
    let o = facedet(&[
        "compare-context",
        "-c",
        &cfg,
        "-o",
        dir.path().join("x").to_str().unwrap(),
        "--variants",
        "Basic1",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn count_params_json() {
    let o = facedet(&["count-params", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let total = v["total"].as_u64().unwrap();
    let parts: u64 = ["backbone", "fpn", "context", "post", "head"]
        .iter()
        .map(|k| v[k].as_u64().unwrap())
        .sum();
    assert_eq!(parts, total);

    let o = facedet(&["count-params", "--set", "model.backbone=\"mobilenet-v2\"", "--set", "model.n=64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("total"));
}
