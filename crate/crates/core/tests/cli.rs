use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_conseg");

fn conseg(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .args(["--set", "profile=desk", "--set", "train.max_steps=5", "--set", "data.num_train=3", "--set", "data.num_eval=2"])
        .arg("--set")
        .arg(format!("output_dir={}", out.display()))
        .env_remove("CONSEG_OUTPUT_ROOT")
        .env("RUST_LOG", "warn");
    cmd.output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = conseg(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let o = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(BIN).args(["eval", "--split", "validation"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(Command::new(BIN).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = conseg(dir.path(), &["synth", "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.lr"), "{err}");

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = Command::new(BIN).args(["-c", cfg.to_str().unwrap(), "synth"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model") && err.contains("width"), "{err}");
}

#[test]
fn pipeline_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["synth"]);
    ok(out, &["train"]);
    ok(out, &["eval", "--mode", "open-vocabulary", "--reweight", "exp"]);
    ok(out, &["eval", "--mode", "open-vocabulary", "--reweight", "linear"]);
    ok(out, &["infer", "--mode", "vocabulary-free"]);

    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,total,cls,pixel,dice"));
    assert_eq!(lines.count(), 5);

    let train = json(&out.join("run-train.json"));
    assert_eq!(train["command"], "train");
    assert_eq!(train["seed"], 0);
    let artifacts: Vec<&str> = train["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(artifacts.contains(&"model.ckpt") && artifacts.contains(&"loss.csv"), "{artifacts:?}");
    assert_eq!(train["config_hash"].as_str().unwrap().len(), 64);

    // Only the reweight-dependent fields may differ between variants.
    let exp = json(&out.join("eval/eval/metrics-open-vocabulary-exp.json"));
    let lin = json(&out.join("eval/eval/metrics-open-vocabulary-linear.json"));
    assert_eq!(exp["mask_digest"], lin["mask_digest"]);
    assert_eq!(exp["mode"], lin["mode"]);
    assert_eq!((exp["reweight"].as_str(), lin["reweight"].as_str()), (Some("exp"), Some("linear")));

    let pred = out.join("predictions/eval-vocabulary-free-none");
    let m = json(&pred.join("manifest.json"));
    assert_eq!(m["images"].as_array().unwrap().len(), 2);
}

#[test]
fn vocabulary_free_without_concepts_names_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["synth"]);
    ok(out, &["train"]);
    let manifest = json(&out.join("data/eval/manifest.json"));
    let ids: Vec<String> = manifest["images"].as_array().unwrap().iter().map(|i| i["image_id"].as_str().unwrap().to_string()).collect();
    let concepts = out.join("concepts.json");
    let body = format!(r#"{{"schema_version": 1, "prompt": "p", "results": {{"{}": [{{"label": "red disc", "confidence": 0.9}}]}}}}"#, ids[0]);
    fs::write(&concepts, body).unwrap();
    let file = format!("concepts.file={}", concepts.display());
    let o = conseg(out, &["eval", "--mode", "vocabulary-free", "--set", "concepts.source=scripted", "--set", &file]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&ids[1]), "{err}");
}

#[test]
fn output_root_is_respected() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["--set", "profile=desk", "--set", "data.num_train=1", "--set", "data.num_eval=1", "--set", "output_dir=nested/run", "synth"])
        .env("CONSEG_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.path().join("nested/run/data/train/manifest.json").exists());
    assert!(root.path().join("nested/run/run-synth.json").exists());
}
