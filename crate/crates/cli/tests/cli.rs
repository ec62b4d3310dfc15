use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use afci_core::{ArchSpec, Model};
use serde_json::Value;

const TINY: &str = r#"{
  "suite": {"trace_duration": 0.1, "arc_traces_per_profile": 3},
  "train": {"epochs": 2, "folds": 2},
  "scale": {"fractions": [0.05, 0.1, 0.2, 0.4, 0.8, 1.0]},
  "transfer": {"source_fractions": [0.5, 1.0], "target_fractions": [0.5, 1.0], "adapt": {"max_epochs": 1}},
  "fleet": {"schedule": {"segments": 2, "segment_duration": 0.05, "nuisance_only": true}, "holdout_nuisance": 0, "holdout_arcs": 0}
}"#;

fn afci(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afci"))
        .current_dir(dir)
        .env_remove("AFCI_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = afci(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A workspace with the tiny config, a suite and its features, shared by
/// the read-only tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("tiny.json"), TINY).unwrap();
        ok(d.path(), &["--config", "tiny.json", "synth", "--out", "suite"]);
        ok(d.path(), &["--config", "tiny.json", "featurize", "--suite", "suite", "--out", "feat"]);
        d
    })
    .path()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn constant_model(arc: bool) -> Model {
    let mut m = Model::init(&ArchSpec::default(), 1).unwrap();
    let b = if arc { [-10.0, 10.0] } else { [10.0, -10.0] };
    m.params.get_mut("head.bias").unwrap().data = b.to_vec();
    m.params.get_mut("head.weight").unwrap().data.fill(0.0);
    m
}

#[test]
fn synth_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.json"), TINY).unwrap();
    let out = ok(d.path(), &["--config", "tiny.json", "synth", "--out", "a"]);
    assert!(out.contains("traces"));
    ok(d.path(), &["--config", "tiny.json", "synth", "--out", "b"]);
    let ma = json(d.path().join("a/run-manifest.json"));
    let mb = json(d.path().join("b/run-manifest.json"));
    assert_eq!(ma["outputs"][0]["sha256"], mb["outputs"][0]["sha256"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    let m = json(d.path().join("a/manifest.json"));
    let nuisance = m["traces"].as_array().unwrap().iter().filter(|t| t["label"] == "normal" && t["category"] != "steady").count();
    assert!(nuisance > 0 && nuisance % 2 == 0);
}

#[test]
fn config_env_var_is_honoured() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.json"), r#"{"train": {"epochs": 0}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_afci"))
        .current_dir(d.path())
        .env("AFCI_CONFIG", "bad.json")
        .args(["synth", "--out", "s"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));
}

#[test]
fn errors_have_distinct_exit_codes() {
    let d = fixture();
    let bad_profile = afci(d, &["synth", "--out", "x", "--set", "suite.profiles.0.switching_freq=1e9"]);
    assert_eq!(bad_profile.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad_profile.stderr).contains("switching_freq"));
    assert_eq!(afci(d, &["synth", "--out", "x", "--set", "train.nope=1"]).status.code(), Some(3));
    let missing = afci(d, &["eval", "--model", "absent.afcm", "--features", "feat/features.afcf", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(4));
    fs::write(d.join("junk.afcm"), b"AFCMjunk").unwrap();
    let junk = afci(d, &["eval", "--model", "junk.afcm", "--features", "feat/features.afcf", "--out", "x"]);
    assert_eq!(junk.status.code(), Some(5));
    assert_eq!(afci(d, &["eval"]).status.code(), Some(2));
}

#[test]
fn eval_reproduces_the_training_fold() {
    let d = fixture();
    let feat = fs::read(d.join("feat/features.afcf")).unwrap();
    ok(d, &["--config", "tiny.json", "train", "--features", "feat/features.afcf", "--out", "tr"]);
    assert_eq!(fs::read(d.join("feat/features.afcf")).unwrap(), feat, "inputs must not change");
    ok(d, &["--config", "tiny.json", "eval", "--model", "tr/model.afcm", "--features", "tr/heldout.afcf", "--out", "ev"]);
    let report = json(d.join("tr/train_report.json"));
    let best = report["best_fold"].as_u64().unwrap() as usize;
    let fold = &report["folds"][best]["metrics"];
    let ev = json(d.join("ev/metrics.json"));
    for k in ["accuracy", "f1", "macro_f1", "roc_auc", "pr_auc"] {
        let (a, b) = (fold[k].as_f64().unwrap(), ev[k].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9, "{k}: {a} vs {b}");
    }
    let m = json(d.join("tr/run-manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["seeds"].as_array().unwrap().iter().any(|s| s[0] == "train.seed"));
}

#[test]
fn detect_reports_alarm_counts() {
    let d = fixture();
    constant_model(false).save(&d.join("quiet.afcm")).unwrap();
    constant_model(true).save(&d.join("loud.afcm")).unwrap();
    let m = json(d.join("suite/manifest.json"));
    let normal = m["traces"].as_array().unwrap().iter().find(|t| t["label"] == "normal").unwrap()["file"].as_str().unwrap().to_string();
    let trace = format!("suite/{normal}");
    let out = ok(d, &["detect", "--model", "quiet.afcm", "--trace", &trace, "--out", "dq"]);
    assert!(out.contains("0 alarms"), "{out}");
    let out = ok(d, &["detect", "--model", "loud.afcm", "--trace", &trace, "--out", "dl"]);
    assert!(!out.contains(" 0 alarms") && out.contains("alarms"), "{out}");
    assert!(d.join("dl/run-manifest.json").exists());
}

#[test]
fn scale_emits_one_row_per_fraction() {
    let d = fixture();
    ok(d, &["--config", "tiny.json", "scale", "--features", "feat/features.afcf", "--out", "sc"]);
    let csv = fs::read_to_string(d.join("sc/scale.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let fit = json(d.join("sc/scaling_fit.json"));
    assert!(fit["fit"]["alpha"].is_number());
}

#[test]
fn featurize_can_split_by_profile() {
    let d = fixture();
    ok(d, &["--config", "tiny.json", "featurize", "--suite", "suite", "--out", "fa", "--profile", "inv-a"]);
    ok(d, &["--config", "tiny.json", "featurize", "--suite", "suite", "--out", "fb", "--profile", "inv-b"]);
    let rows = |p: &str| json(d.join(p))["count"].as_u64().unwrap();
    assert_eq!(rows("fa/features.json") + rows("fb/features.json"), rows("feat/features.json"));
    assert_eq!(afci(d, &["featurize", "--suite", "suite", "--out", "fz", "--profile", "inv-z"]).status.code(), Some(3));
    ok(d, &["--config", "tiny.json", "transfer", "--source", "fa/features.afcf", "--target", "fb/features.afcf", "--out", "xf"]);
    let csv = fs::read_to_string(d.join("xf/source_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(d.join("xf/target_sweep_source_1.csv").exists());
}

#[test]
fn quiet_fleet_raises_nothing() {
    let d = fixture();
    constant_model(false).save(&d.join("quiet_fleet.afcm")).unwrap();
    let out = ok(d, &["--config", "tiny.json", "fleet", "--model", "quiet_fleet.afcm", "--features", "feat/features.afcf", "--out", "fl"]);
    assert!(out.starts_with("device_id,alarms,precision_before,precision_after"));
    let r = json(d.join("fl/fleet_report.json"));
    assert_eq!(r["before"]["alarms"], 0);
    assert_eq!(r["rounds"].as_array().unwrap().len(), 0);
    assert_eq!(fs::read_to_string(d.join("fl/fleet_report.csv")).unwrap().lines().count(), 11);
}
