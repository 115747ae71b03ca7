//! End-to-end behavior of the `rct` binary: outputs, exit codes and
//! cross-command consistency.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rct_core::synthgen;

fn rct() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rct"))
}

fn run(args: &[&str]) -> Output {
    rct().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small self-contained generator config file.
fn write_gen_config(dir: &Path, n_records: usize, seed: u64) -> PathBuf {
    let (mut gen, schema) = synthgen::synth_std();
    gen.n_records = n_records;
    gen.seed = seed;
    let file = serde_json::json!({ "schema": schema, "gen": gen });
    let path = dir.join("gen.json");
    fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
    path
}

fn write_train_config(dir: &Path, data: &Path, schema: &Path, epochs: usize) -> PathBuf {
    let config = serde_json::json!({
        "schema": schema,
        "data": {"path": data, "split": [0.7, 0.15, 0.15], "split_seed": 3},
        "model": {"variant": "rct", "d_model": 16, "layers": 1, "heads": 2},
        "train": {"batch_size": 64, "max_epochs": epochs, "eval_every": 10, "seed": 5}
    });
    let path = dir.join("train.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn generate_small(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let gen_config = write_gen_config(dir, n, seed);
    let out = dir.join("data");
    let result = run(&[
        "generate",
        "--config",
        gen_config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&result, 0);
    (out.join("data.jsonl"), out.join("schema.json"))
}

#[test]
fn generate_is_checksum_stable_and_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let gen_config = write_gen_config(dir.path(), 120, 9);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    let r1 = run(&["generate", "--config", gen_config.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    let r2 = run(&["generate", "--config", gen_config.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_code(&r1, 0);
    assert_code(&r2, 0);
    let stdout = String::from_utf8_lossy(&r1.stdout);
    assert!(stdout.contains("wrote 120 records"), "{stdout}");
    assert!(stdout.contains("MAE% = 0"), "{stdout}");
    assert!(stdout.contains("MAE% = 100"), "{stdout}");
    assert_eq!(
        fs::read(out1.join("data.jsonl")).unwrap(),
        fs::read(out2.join("data.jsonl")).unwrap()
    );
    // the sidecar is itself a valid generator config
    let sidecar = out1.join("gen_config.json");
    let out3 = dir.path().join("c");
    let r3 = run(&["generate", "--config", sidecar.to_str().unwrap(), "--out", out3.to_str().unwrap()]);
    assert_code(&r3, 0);
    assert_eq!(
        fs::read(out1.join("data.jsonl")).unwrap(),
        fs::read(out3.join("data.jsonl")).unwrap()
    );
}

#[test]
fn generate_without_out_is_a_usage_error() {
    let out = run(&["generate", "--preset", "synth-std"]);
    assert_code(&out, 2);
}

#[test]
fn generate_seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let gen_config = write_gen_config(dir.path(), 50, 9);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    assert_code(&run(&["generate", "--config", gen_config.to_str().unwrap(), "--out", out1.to_str().unwrap()]), 0);
    assert_code(
        &run(&["generate", "--config", gen_config.to_str().unwrap(), "--seed", "10", "--out", out2.to_str().unwrap()]),
        0,
    );
    assert_ne!(
        fs::read(out1.join("data.jsonl")).unwrap(),
        fs::read(out2.join("data.jsonl")).unwrap()
    );
}

#[test]
fn train_eval_round_trip_reproduces_summary_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 400, 1);
    let config = write_train_config(dir.path(), &data, &schema, 2);
    let out = dir.path().join("run");
    let r = run(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_code(&r, 0);
    for artifact in ["model.ckpt", "history.csv", "summary.json", "test.jsonl"] {
        assert!(out.join(artifact).exists(), "{artifact} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let expected = summary["test_mae_percent"].as_f64().unwrap();

    let eval = run(&[
        "eval",
        "--model",
        out.join("model.ckpt").to_str().unwrap(),
        "--data",
        out.join("test.jsonl").to_str().unwrap(),
    ]);
    assert_code(&eval, 0);
    let stdout = String::from_utf8_lossy(&eval.stdout);
    let line = stdout.lines().find(|l| l.starts_with("MAE% = ")).unwrap();
    let got: f64 = line.trim_start_matches("MAE% = ").parse().unwrap();
    assert_eq!(got.to_bits(), expected.to_bits(), "{stdout}");
}

#[test]
fn rerun_with_same_seed_matches_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 300, 2);
    let config = write_train_config(dir.path(), &data, &schema, 1);
    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    assert_code(&run(&["train", "--config", config.to_str().unwrap(), "--out", out1.to_str().unwrap()]), 0);
    assert_code(&run(&["train", "--config", config.to_str().unwrap(), "--out", out2.to_str().unwrap()]), 0);
    assert_eq!(
        fs::read(out1.join("model.ckpt")).unwrap(),
        fs::read(out2.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(out1.join("history.csv")).unwrap(),
        fs::read(out2.join("history.csv")).unwrap()
    );
    let mut a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out1.join("summary.json")).unwrap()).unwrap();
    let mut b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out2.join("summary.json")).unwrap()).unwrap();
    a.as_object_mut().unwrap().remove("timing");
    b.as_object_mut().unwrap().remove("timing");
    assert_eq!(a, b);
}

#[test]
fn invalid_head_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 300, 3);
    let config = serde_json::json!({
        "schema": schema,
        "data": {"path": data},
        "model": {"variant": "rct", "d_model": 32, "heads": 5},
        "train": {"max_epochs": 1}
    });
    let path = dir.path().join("bad.json");
    fs::write(&path, config.to_string()).unwrap();
    let out = dir.path().join("out");
    let r = run(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_code(&r, 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("divisible"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 300, 4);
    let config = serde_json::json!({
        "schema": schema,
        "data": {"path": data},
        "model": {"variant": "rct", "d_modle": 32},
        "train": {}
    });
    let path = dir.path().join("typo.json");
    fs::write(&path, config.to_string()).unwrap();
    let r = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_code(&r, 2);
}

#[test]
fn eval_with_mismatched_schema_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 300, 5);
    let config = write_train_config(dir.path(), &data, &schema, 1);
    let out = dir.path().join("run");
    assert_code(&run(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);

    // a dataset with a different schema
    let other_dir = dir.path().join("other");
    fs::create_dir_all(&other_dir).unwrap();
    let mut schema_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&schema).unwrap()).unwrap();
    schema_json["dimension"].as_array_mut().unwrap().remove(0);
    // rewrite records without the removed feature? simpler: evaluate the
    // trained model against a structurally different data file
    let bad_data = other_dir.join("bad.jsonl");
    fs::write(&bad_data, "{\"dimension\":{},\"route\":{},\"service\":{},\"items\":[],\"charges\":[],\"heuristic_cost\":1.0,\"actual_cost\":1.0}\n").unwrap();
    let r = run(&[
        "eval",
        "--model",
        out.join("model.ckpt").to_str().unwrap(),
        "--data",
        bad_data.to_str().unwrap(),
    ]);
    assert_code(&r, 4);
}

#[test]
fn analyze_requires_a_fixed_stratum_and_filters_help() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 400, 6);
    let config = write_train_config(dir.path(), &data, &schema, 1);
    let out = dir.path().join("run");
    assert_code(&run(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let model = out.join("model.ckpt");

    // mixed item counts in the raw file -> exit 4 with an instruction
    let r = run(&[
        "analyze",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("h.csv").to_str().unwrap(),
    ]);
    assert_code(&r, 4);
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("stratum"), "{stderr}");

    // stratum filter flags make it pass
    let heat = dir.path().join("heat.csv");
    let r = run(&[
        "analyze",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--items",
        "2",
        "--charges",
        "1",
        "--out",
        heat.to_str().unwrap(),
    ]);
    assert_code(&r, 0);
    let csv = fs::read_to_string(&heat).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "token,head_0,head_1");
    // 10 fixed tokens + 2 items + 1 charge + heuristic
    assert_eq!(lines.len(), 1 + 14);
    assert!(lines.iter().any(|l| l.starts_with("item_1,")));
    assert!(lines.iter().any(|l| l.starts_with("heuristic,")));
}

#[test]
fn export_writes_one_row_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 350, 7);
    let config = write_train_config(dir.path(), &data, &schema, 1);
    let out = dir.path().join("run");
    assert_code(&run(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let csv_path = dir.path().join("embeddings.csv");
    let r = run(&[
        "export",
        "--model",
        out.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_code(&r, 0);
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 350);
    assert!(csv.lines().next().unwrap().starts_with("index,e0,"));
    assert!(csv.lines().next().unwrap().ends_with("actual_cost,heuristic_cost"));
}

#[test]
fn sweep_reports_cells_plus_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = generate_small(dir.path(), 400, 8);
    let config = write_train_config(dir.path(), &data, &schema, 1);
    let csv_path = dir.path().join("sweep.csv");
    let r = rct()
        .args([
            "sweep",
            "--kind",
            "layers",
            "--values",
            "1,2",
            "--seeds",
            "0,1",
            "--config",
            config.to_str().unwrap(),
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .env("RCT_THREADS", "2")
        .output()
        .unwrap();
    assert_code(&r, 0);
    let csv = fs::read_to_string(&csv_path).unwrap();
    // header + |values| x |seeds| cells + |values| summary rows
    assert_eq!(csv.lines().count(), 1 + 4 + 2, "{csv}");

    // indivisible head count is rejected up front
    let r = run(&[
        "sweep",
        "--kind",
        "heads",
        "--values",
        "3",
        "--seeds",
        "0",
        "--config",
        config.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_code(&r, 2);
}
