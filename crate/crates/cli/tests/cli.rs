use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CIRCLES: &str = r#"{
    "dataset": {"name": "circles", "grid": {"pos_x": 8, "pos_y": 8}},
    "condition": "circles_midpos",
    "objective": {"family": "wae", "reconstruction": "mse"},
    "train": {"batch": 16, "learning_rate": 0.0005, "max_epochs": 2, "seed": 0},
    "metrics": {"sample_size": 64},
    "output_dir": "unused",
    "seed": 0
}"#;

fn comgen(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.in.json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_comgen"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn gen_writes_archive_and_split() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&comgen(tmp.path(), CIRCLES, &["--out", out.to_str().unwrap(), "gen"]));
    let (images, space) = comgen_core::dataio::read_fids(out.join("data/dataset.fids")).unwrap();
    assert_eq!(images.len(), 64);
    assert_eq!(space.total(), 64);
    let split = json(out.join("data/split.json"));
    assert!(split.is_object());
    let manifest = json(out.join("manifests/gen.json"));
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn full_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| tmp.path().join(n)).collect();
    for r in &runs {
        ok(&comgen(tmp.path(), CIRCLES, &["--out", r.to_str().unwrap(), "all"]));
    }
    let losses = json(runs[0].join("eval/losses.json"));
    for key in ["train_loss", "test_loss", "disentanglement"] {
        assert!(losses[key].is_f64(), "missing {key}");
    }
    let r2 = json(runs[0].join("eval/r2.json"));
    assert_eq!(r2["train"]["per_factor"].as_array().unwrap().len(), 2);
    let dci = json(runs[0].join("eval/disentanglement.json"));
    assert!(dci["coefficients"].is_array());
    let drift = json(runs[0].join("diagnose/drift.json"));
    assert!(drift["aggregate"].as_f64().unwrap() >= 0.0);
    for rel in [
        "data/dataset.fids",
        "data/split.json",
        "checkpoints/final/params.bin",
        "eval/disentanglement.json",
        "eval/r2.json",
        "eval/losses.json",
        "diagnose/groups.csv",
        "diagnose/drift.json",
        "diagnose/hinton.csv",
    ] {
        let a = fs::read(runs[0].join(rel)).unwrap();
        let b = fs::read(runs[1].join(rel)).unwrap();
        assert!(a == b, "{rel} differs between identical runs");
    }
}

#[test]
fn eval_reuses_stored_data_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    ok(&comgen(tmp.path(), CIRCLES, &["--out", o, "train"]));
    assert!(out.join("data/dataset.fids").exists());
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    ok(&comgen(tmp.path(), CIRCLES, &["--out", o, "eval"]));
    ok(&comgen(
        tmp.path(),
        CIRCLES,
        &["--out", o, "diagnose", "--factor-a", "posY", "--factor-b", "posX"],
    ));
    let groups = fs::read_to_string(out.join("diagnose/groups.csv")).unwrap();
    assert!(groups.lines().nth(1).unwrap().starts_with("posY,posX,"));
}

#[test]
fn configuration_errors_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();

    let bad = CIRCLES.replace("\"mse\"", "\"bernoulli_bce\"");
    let r = comgen(tmp.path(), &bad, &["--out", o, "gen"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("objective"));

    let r = comgen(tmp.path(), "{ not json", &["--out", o, "gen"]);
    assert_eq!(r.status.code(), Some(2));

    let r = comgen(tmp.path(), CIRCLES, &["--out", o, "diagnose", "--factor-a", "posX", "--factor-b", "hue"]);
    assert_eq!(r.status.code(), Some(2));

    let r = Command::new(env!("CARGO_BIN_EXE_comgen"))
        .args(["--config", "/nonexistent/config.json", "gen"])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));

    let r = Command::new(env!("CARGO_BIN_EXE_comgen"))
        .arg("--config")
        .arg(tmp.path().join("config.in.json"))
        .args(["--out", o, "gen"])
        .env("COMGEN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let r = comgen(tmp.path(), CIRCLES, &["--out", out.to_str().unwrap(), "eval"]);
    assert_eq!(r.status.code(), Some(1));
}
