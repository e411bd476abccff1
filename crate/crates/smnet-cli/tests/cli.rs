//! End-to-end tests for the `smnet` binary: every subcommand, the exit-code
//! contract, run.json bookkeeping, and determinism of the pipeline.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn sha256(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(std::fs::read(path).expect("readable"));
    format!("{:x}", h.finalize())
}

/// Small plate dataset shared by most tests.
fn gen_plate(dir: &Path, samples: u32, seed: u64) -> String {
    run_ok(&[
        "gen",
        "--mechanism",
        "thermal",
        "--topology",
        "plate",
        "--samples",
        &samples.to_string(),
        "--density",
        "14",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().expect("utf8"),
    ])
}

fn preprocess(input: &Path, out: &Path) -> String {
    run_ok(&[
        "preprocess",
        "--in",
        input.join("manifest.json").to_str().expect("utf8"),
        "--cell",
        "0.05",
        "--out",
        out.to_str().expect("utf8"),
    ])
}

fn train(data: &Path, out: &Path, epochs: usize, seed: u64) -> String {
    run_ok(&[
        "train",
        "--data",
        data.to_str().expect("utf8"),
        "--preset",
        "desk",
        "--epochs",
        &epochs.to_string(),
        "--batch",
        "4",
        "--lr",
        "0.02",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().expect("utf8"),
    ])
}

#[test]
fn gen_is_deterministic_and_reports_layout() {
    let tmp = TempDir::new().expect("tempdir");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let stdout = gen_plate(&a, 6, 9);
    assert!(stdout.contains("control_dim: 36"));
    gen_plate(&b, 6, 9);
    for i in 0..6 {
        let name = format!("sample_{i:05}.pcd1");
        assert_eq!(sha256(&a.join(&name)), sha256(&b.join(&name)), "{name} differs");
    }
    // different seed changes the data
    let c = tmp.path().join("c");
    gen_plate(&c, 6, 10);
    assert_ne!(sha256(&a.join("sample_00000.pcd1")), sha256(&c.join("sample_00000.pcd1")));
}

#[test]
fn gen_cube_layouts_match_mechanism() {
    let tmp = TempDir::new().expect("tempdir");
    let out = run_ok(&[
        "gen", "--mechanism", "ionic", "--topology", "cube", "--samples", "1", "--density", "8",
        "--seed", "1", "--out", tmp.path().join("i").to_str().expect("utf8"),
    ]);
    assert!(out.contains("control_dim: 216"), "ionic cube: {out}");
    let out = run_ok(&[
        "gen", "--mechanism", "thermal", "--topology", "cube", "--samples", "1", "--density", "8",
        "--seed", "1", "--out", tmp.path().join("t").to_str().expect("utf8"),
    ]);
    assert!(out.contains("control_dim: 152"), "thermal cube: {out}");
}

#[test]
fn preprocess_normalizes_and_is_idempotent() {
    let tmp = TempDir::new().expect("tempdir");
    let data = tmp.path().join("data");
    gen_plate(&data, 5, 4);
    let prep = tmp.path().join("prep");
    let stdout = preprocess(&data, &prep);
    assert!(stdout.contains("n_points = "), "auto point count echoed: {stdout}");

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(prep.join("manifest.json")).expect("manifest"),
    )
    .expect("json");
    let pp = &manifest["preprocessing"];
    assert_eq!(pp["interior_cell"], serde_json::json!(0.05));
    let n = pp["n_points"].as_u64().expect("n_points recorded") as usize;

    // normalized coordinates live in [-0.5, 0.5]
    let cloud = smnet::pointcloud::read_cloud(&prep.join("sample_00000.pcd1")).expect("cloud");
    assert_eq!(cloud.len(), n);
    for p in cloud.points() {
        for k in 0..3 {
            assert!(p[k].abs() <= 0.5 + 1e-6, "coordinate out of range: {}", p[k]);
        }
    }

    // preprocessing an already-preprocessed dataset copies it bit-for-bit
    let prep2 = tmp.path().join("prep2");
    preprocess(&prep, &prep2);
    for i in 0..5 {
        let name = format!("sample_{i:05}.pcd1");
        assert_eq!(sha256(&prep.join(&name)), sha256(&prep2.join(&name)), "{name} differs");
    }
    assert_eq!(sha256(&prep.join("manifest.json")), sha256(&prep2.join("manifest.json")));
}

#[test]
fn preprocess_rejects_oversized_point_count() {
    let tmp = TempDir::new().expect("tempdir");
    let data = tmp.path().join("data");
    gen_plate(&data, 3, 5);
    let out = run(&[
        "preprocess",
        "--in",
        data.join("manifest.json").to_str().expect("utf8"),
        "--cell",
        "0.05",
        "--n-points",
        "100000",
        "--out",
        tmp.path().join("prep").to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fewer than 100000"));
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_them() {
    let tmp = TempDir::new().expect("tempdir");
    let data = tmp.path().join("data");
    gen_plate(&data, 10, 7);
    let prep = tmp.path().join("prep");
    preprocess(&data, &prep);
    let run1 = tmp.path().join("run1");
    train(&prep, &run1, 1, 3);
    for name in [
        "model.cfg",
        "model.params",
        "preprocess.json",
        "surrogate.json",
        "history.csv",
        "metrics.json",
        "per_dim_error.csv",
        "run.json",
    ] {
        assert!(run1.join(name).exists(), "missing artifact {name}");
    }
    // history: header plus one row per epoch
    let history = std::fs::read_to_string(run1.join("history.csv")).expect("history");
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_mse,test_mse,test_mae,test_r2");
    assert_eq!(lines.len(), 2);

    // retraining with the same seed is bit-identical
    let run2 = tmp.path().join("run2");
    train(&prep, &run2, 1, 3);
    assert_eq!(sha256(&run1.join("history.csv")), sha256(&run2.join("history.csv")));
    assert_eq!(sha256(&run1.join("model.params")), sha256(&run2.join("model.params")));

    // eval on the same data reproduces the train-time test metrics exactly
    let ev = tmp.path().join("eval");
    run_ok(&[
        "eval",
        "--model",
        run1.to_str().expect("utf8"),
        "--data",
        prep.to_str().expect("utf8"),
        "--ablation",
        "smnet",
        "--out",
        ev.to_str().expect("utf8"),
    ]);
    assert_eq!(sha256(&run1.join("metrics.json")), sha256(&ev.join("metrics.json")));
    assert_eq!(sha256(&run1.join("per_dim_error.csv")), sha256(&ev.join("per_dim_error.csv")));

    // per-dimension table has one row per control plus the header
    let per_dim = std::fs::read_to_string(ev.join("per_dim_error.csv")).expect("per_dim");
    assert_eq!(per_dim.lines().count(), 37);

    // plate datasets produce a single error-map face of the pinned resolution
    let map = std::fs::read_to_string(ev.join("errmap_face_plate.csv")).expect("errmap");
    let rows: Vec<&str> = map.lines().collect();
    assert_eq!(rows[0], "plate");
    assert_eq!(rows.len(), 31);
    assert_eq!(rows[1].split(',').count(), 30);
}

#[test]
fn eval_rejects_mismatched_ablation() {
    let tmp = TempDir::new().expect("tempdir");
    let data = tmp.path().join("data");
    gen_plate(&data, 10, 2);
    let prep = tmp.path().join("prep");
    preprocess(&data, &prep);
    let run1 = tmp.path().join("run1");
    train(&prep, &run1, 0, 1);
    let out = run(&[
        "eval",
        "--model",
        run1.to_str().expect("utf8"),
        "--data",
        prep.to_str().expect("utf8"),
        "--ablation",
        "kpconv",
        "--out",
        tmp.path().join("ev").to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ablation mismatch"));
}

#[test]
fn infer_predicts_and_reports_missing_targets() {
    let tmp = TempDir::new().expect("tempdir");
    let data = tmp.path().join("data");
    gen_plate(&data, 10, 8);
    let prep = tmp.path().join("prep");
    preprocess(&data, &prep);
    let run1 = tmp.path().join("run1");
    train(&prep, &run1, 0, 1);

    let inf = tmp.path().join("inf");
    run_ok(&[
        "infer",
        "--model",
        run1.to_str().expect("utf8"),
        "--target",
        data.join("sample_00004.pcd1").to_str().expect("utf8"),
        "--replay",
        "--out",
        inf.to_str().expect("utf8"),
    ]);
    let pred: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(inf.join("prediction.json")).expect("pred"))
            .expect("json");
    assert_eq!(pred["control"].as_array().expect("array").len(), 36);
    for v in pred["clamped"].as_array().expect("array") {
        let v = v.as_f64().expect("number");
        assert!((-1.0..=1.0).contains(&v));
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(inf.join("metrics.json")).expect("metrics"))
            .expect("json");
    assert!(metrics["chamfer"].as_f64().expect("chamfer").is_finite());

    let out = run(&[
        "infer",
        "--model",
        run1.to_str().expect("utf8"),
        "--target",
        "/no/such/cloud.pcd1",
        "--out",
        tmp.path().join("bad").to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/cloud.pcd1"));
}

#[test]
fn complexity_builtins_obey_invariants() {
    let tmp = TempDir::new().expect("tempdir");
    let out_dir = tmp.path().join("cx");
    let value = |name: &str, grid: &str| -> f64 {
        let stdout = run_ok(&[
            "complexity", "--in", name, "--grid", grid, "--out",
            out_dir.to_str().expect("utf8"),
        ]);
        stdout
            .trim()
            .strip_prefix("complexity: ")
            .expect("prefixed")
            .parse()
            .expect("numeric")
    };
    assert_eq!(value("plane", "31"), 0.0);
    let dome = value("dome", "31");
    let saddle = value("saddle", "31");
    assert!((dome - saddle).abs() <= 1e-9 * dome.max(1.0), "dome {dome} vs saddle {saddle}");
    assert!(value("wavy:3", "41") < value("wavy:7", "41"));
}

#[test]
fn run_json_records_resolution_and_outputs() {
    let tmp = TempDir::new().expect("tempdir");
    let data = tmp.path().join("data");
    gen_plate(&data, 3, 6);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("run.json")).expect("run.json"))
            .expect("json");
    assert_eq!(record["command"], "gen");
    assert_eq!(record["status"], "ok");
    assert_eq!(record["resolved"]["control_dim"], 36);
    let outputs = record["outputs"].as_object().expect("outputs");
    assert_eq!(
        outputs["sample_00000.pcd1"].as_str().expect("hash"),
        sha256(&data.join("sample_00000.pcd1"))
    );
    assert!(outputs.contains_key("manifest.json"));
    assert!(!outputs.contains_key("run.json"));
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["gen", "--mechanism", "magnetic", "--topology", "plate", "--samples", "1",
        "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
}
