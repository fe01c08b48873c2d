use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn texter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_texter")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, config: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

/// A run small enough to finish in seconds.
fn tiny_config(out: &Path) -> Value {
    json!({
        "paths": { "out": out },
        "data": { "train": 240, "test": 12, "sae_pool": 600 },
        "classifier": { "epochs": 2 },
        "embedder": { "epochs": 2 },
        "sae": { "epochs": 2 },
        "bootstrap": { "resamples": 50 },
        "explain": { "attribution": { "steps": 16 }, "viz": { "iterations": 24 } },
        "explain_images": [0, 1]
    })
}

#[test]
fn help_lists_config_keys_and_exit_codes() {
    let out = texter(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["* sae.topk_ratio = 0.1", "* explain.k_con = 3", "  data.test = 200", "explain.viz.magnitude"] {
        assert!(text.contains(key), "help is missing `{key}`");
    }
    assert!(text.contains("5 missing prerequisite"));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad_type = write_config(dir.path(), "type.json", &json!({ "data": { "test": "many" } }));
    assert_eq!(texter(&["gen-data", "--config", &bad_type]).status.code(), Some(2));
    let bad_value = write_config(dir.path(), "value.json", &json!({ "data": { "scene": { "classes": 1 } } }));
    assert_eq!(texter(&["gen-data", "--config", &bad_value]).status.code(), Some(2));
    assert_eq!(texter(&["gen-data", "--method", "oracle"]).status.code(), Some(2));
}

#[test]
fn unreadable_config_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(texter(&["gen-data", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn missing_prerequisite_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = texter(&["train-classifier", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("gen-data"), "stderr: {err}");
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = write_config(dir.path(), "tiny.json", &tiny_config(&run));
    let out = texter(&["all", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for stage in ["gen-data", "train-classifier", "train-embedder", "train-sae", "train-aligner", "explain", "evaluate", "bench-faithfulness"] {
        let manifest = read_json(&run.join("manifests").join(format!("{stage}.json")));
        assert_eq!(manifest["stage"], stage);
    }
    let explanation = read_json(&run.join("explanations/000001.json"));
    assert_eq!(explanation["explanation"]["results"].as_array().unwrap().len(), 3);
    assert!(run.join("explanations/000001_concept.ppm").exists());

    // Twelve test images is below the recommended minimum.
    let bench = read_json(&run.join("reports/faithfulness.json"));
    let warnings = bench["report"]["warnings"].as_array().unwrap();
    assert!(warnings.iter().any(|w| w.as_str().unwrap().contains("12")), "{warnings:?}");
    assert_eq!(read_json(&run.join("reports/evaluation.json"))["report"]["space"], "sae");

    let forced = texter(&["explain", "--config", &config, "--class", "2"]);
    assert!(forced.status.success());
    assert_eq!(read_json(&run.join("explanations/000000.json"))["explanation"]["class"], 2);
    assert_eq!(texter(&["explain", "--config", &config, "--class", "9"]).status.code(), Some(2));

    let mut raw = tiny_config(&run);
    raw["use_sae"] = json!(false);
    let raw_config = write_config(dir.path(), "raw.json", &raw);
    assert!(texter(&["evaluate", "--config", &raw_config]).status.success());
    assert_eq!(read_json(&run.join("reports/evaluation.json"))["report"]["space"], "raw");
}
