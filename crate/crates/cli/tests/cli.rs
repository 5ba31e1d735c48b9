use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hgens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgens"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_dataset(dir: &Path) {
    let out = hgens(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--num_targets=150",
        "--num_b=30",
        "--num_c=30",
        "--feature_dim=6",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

const SMALL_TRAIN: [&str; 4] = ["--hidden=32", "--max_epochs=4", "--batch_sizes=32,64", "--threads=1"];

#[test]
fn gradcheck_passes_on_seed_seven() {
    let out = hgens(&["gradcheck", "--seed", "7", "--eps", "1e-5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(r["passed"], Value::Bool(true));
}

#[test]
fn gradflow_shows_the_residual_keeping_gradients_alive() {
    let out = hgens(&["gradflow", "--k", "4", "--spread", "1e6"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    let min = &r["sources"][r["min_source"].as_u64().unwrap() as usize];
    assert!(min["norm_without_residual"].as_f64().unwrap() < 1e-5);
    assert!(min["norm_with_residual"].as_f64().unwrap() >= 0.25);
}

#[test]
fn corrupted_manifests_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let manifest = fs::read_to_string(data.join("manifest.json")).unwrap();

    fs::write(data.join("manifest.json"), manifest.replace("\"target_type\": \"A\"", "\"target_type\": \"Zed\"")).unwrap();
    let out = hgens(&["ingest", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Zed"), "{}", stderr(&out));

    fs::write(data.join("manifest.json"), &manifest[..manifest.len() / 2]).unwrap();
    let out = hgens(&["ingest", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("manifest"), "{}", stderr(&out));

    fs::write(data.join("manifest.json"), &manifest).unwrap();
    let edges = fs::read_to_string(data.join("edges_ab.tsv")).unwrap();
    fs::write(data.join("edges_ab.tsv"), format!("{edges}0\t999\n")).unwrap();
    let out = hgens(&["ingest", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("999"), "{}", stderr(&out));
}

#[test]
fn ingest_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = hgens(&["ingest", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["split_sizes"], serde_json::json!([90, 30, 30]));
    assert_eq!(r["node_types"][0], serde_json::json!(["A", 150, 6]));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_dataset(&a);
    small_dataset(&b);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn train_twice_on_one_thread_is_bitwise_identical_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let mut csv = Vec::new();
    for run in ["r1", "r2"] {
        let out_dir = dir.path().join(run);
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "3"];
        args.extend(SMALL_TRAIN);
        let out = hgens(&args);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        csv.push(fs::read(out_dir.join("metrics.csv")).unwrap());
        let config: Value = serde_json::from_slice(&fs::read(out_dir.join("config.json")).unwrap()).unwrap();
        assert_eq!(config["seed"], 3);
        assert_eq!(config["batch_sizes"], serde_json::json!([32, 64]));
    }
    assert_eq!(csv[0], csv[1]);

    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("r1/report.json")).unwrap()).unwrap();
    let out = hgens(&["eval", "--data", data.to_str().unwrap(), "--run", dir.path().join("r1").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(json(&out)["test_acc"], report["test_acc"]);
}

#[test]
fn config_file_then_overrides_last_writer_wins() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"hidden": 64, "max_epochs": 2, "batch_sizes": [50, 150], "seed": 9}"#).unwrap();
    let out_dir = dir.path().join("run");
    let out = hgens(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--hidden=32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let config: Value = serde_json::from_slice(&fs::read(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!((config["hidden"].as_u64(), config["seed"].as_u64()), (Some(32), Some(9)));
}

#[test]
fn invalid_settings_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let d = data.to_str().unwrap();
    let o = dir.path().join("run");
    let o = o.to_str().unwrap();
    for args in [
        vec!["train", "--data", d, "--out", o, "--hidden=48"],
        vec!["train", "--data", d, "--out", o, "--no_such_key=1"],
        vec!["train", "--data", d, "--out", o, "--groups=zz"],
        vec!["ablate", "--data", d, "--mode", "bogus"],
        vec!["scaling", "--sizes", "1000,2000"],
        vec!["gradflow", "--k", "0"],
        vec!["frobnicate"],
    ] {
        let out = hgens(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
    }
    let out = hgens(&["train", "--data", d, "--out", o, "--hidden=48", "--unsafe-hparams", "--max_epochs=1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn ablate_reports_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let mut args = vec!["ablate", "--data", data.to_str().unwrap(), "--mode", "single_group:ab", "--seeds", "0,1"];
    args.extend(SMALL_TRAIN);
    let out = hgens(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["report"]["baseline"].as_array().unwrap().len(), 2);
    assert_eq!(r["report"]["variant"].as_array().unwrap().len(), 2);
}
