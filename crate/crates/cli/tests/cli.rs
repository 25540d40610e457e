use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "dataset": {"n_per_group": 24, "shape": [16, 16]},
  "classifier": {"epochs": 2, "batch_size": 8},
  "simulator": {"epochs": 1, "batch_size": 8, "lr": 0.01},
  "explain": {"occlusion_window": 4}
}"#;

fn cfsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsim")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cfsim(args);
    assert!(
        out.status.success(),
        "cfsim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn failure(args: &[&str]) -> (i32, Value) {
    let out = cfsim(args);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    (out.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p
}

fn pipeline(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = write_config(root, TINY);
    let data = root.join("data");
    let run = root.join("run");
    ok(&["synthgen", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train-classifier", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    ok(&["train-simulator", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    (data, run)
}

fn assert_manifest_complete(dir: &Path) {
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let artifacts = m["artifacts"].as_object().unwrap();
    let mut on_disk = cfsim_cli::manifest::list_files(dir).unwrap();
    on_disk.retain(|f| f != "manifest.json");
    let listed: Vec<String> = artifacts.keys().cloned().collect();
    assert_eq!(listed, on_disk);
    for (rel, hash) in artifacts {
        assert_eq!(&cfsim::io::sha256_file(&dir.join(rel)).unwrap(), hash.as_str().unwrap());
    }
}

#[test]
fn full_run_is_manifested_and_evaluation_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (data, run) = pipeline(root.path());
    for method in ["proposed", "bp", "guided-bp", "grad-cam", "guided-grad-cam", "occlusion"] {
        let out = ok(&["explain", "--method", method, "--out", s(&run)]);
        assert_eq!(out["command"], "explain");
    }
    let first = ok(&["evaluate", "--out", s(&run)]);
    let a = fs::read(run.join("evaluation.json")).unwrap();
    ok(&["evaluate", "--out", s(&run)]);
    let b = fs::read(run.join("evaluation.json")).unwrap();
    assert_eq!(a, b);
    assert!(first["mean_ncc"]["proposed-direct"].is_number());
    let report = ok(&["report", "--out", s(&run)]);
    assert_eq!(report["figures"].as_array().unwrap().len(), cfsim::evalviz::REPORT_FILES.len());

    for sub in ["config.json", "manifest.json", "checkpoints", "metrics", "patterns", "figures"] {
        assert!(run.join(sub).exists(), "{sub} missing");
    }
    assert!(run.join("patterns/occlusion/occlusion.json").is_file());
    assert_manifest_complete(&run);
    assert_manifest_complete(&data);
    let m: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["simulator"]["delta"], 5.0);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(m["inputs"]["data"]["sha256"].is_string());
    assert!(m["commands"].as_array().unwrap().len() >= 10);
}

#[test]
fn identical_config_and_seed_reproduce_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ra) = pipeline(a.path());
    let (_, rb) = pipeline(b.path());
    for f in ["metrics/classifier.jsonl", "metrics/simulator.jsonl", "checkpoints/classifier/params.bin"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_config_key_is_a_structured_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), r#"{"simulator": {"detla": 5}}"#);
    let (code, err) = failure(&["synthgen", "--config", s(&cfg), "--out", s(&root.path().join("d"))]);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("detla"));
}

#[test]
fn invalid_values_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), r#"{"simulator": {"delta": -1}}"#);
    let (code, err) = failure(&["synthgen", "--config", s(&cfg), "--out", s(&root.path().join("d"))]);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
}

#[test]
fn missing_inputs_are_listed() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    let (code, err) = failure(&["train-classifier", "--out", s(&run)]);
    assert_eq!(code, 3);
    assert_eq!(err["missing"][0], "--data");
    let (code, err) = failure(&["report", "--out", s(&run)]);
    assert_eq!(code, 3);
    assert_eq!(err["missing"].as_array().unwrap().len(), cfsim::evalviz::render::report_inputs().len());
}

#[test]
fn tampered_artifact_is_a_hash_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let (_, run) = pipeline(root.path());
    let log = run.join("metrics/classifier.jsonl");
    let mut text = fs::read_to_string(&log).unwrap();
    text.push('\n');
    fs::write(&log, text).unwrap();
    let (code, err) = failure(&["evaluate", "--out", s(&run)]);
    assert_eq!(code, 4);
    assert_eq!(err["error"], "hash-mismatch");
}

#[test]
fn seed_flag_overrides_config_everywhere() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    let data = root.path().join("data");
    ok(&["synthgen", "--config", s(&cfg), "--out", s(&data), "--seed", "7"]);
    let c: Value = serde_json::from_str(&fs::read_to_string(data.join("config.json")).unwrap()).unwrap();
    for section in ["dataset", "classifier", "simulator"] {
        assert_eq!(c[section]["seed"], 7);
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["dataset"], 7);

    let other = root.path().join("other");
    ok(&["synthgen", "--config", s(&cfg), "--out", s(&other), "--seed", "8"]);
    assert_ne!(
        fs::read(data.join("images/000000.f32")).unwrap(),
        fs::read(other.join("images/000000.f32")).unwrap()
    );
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = cfsim(&["explain", "--method", "lime", "--out", "x"]);
    assert!(!out.status.success());
}
