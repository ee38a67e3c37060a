use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ctlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctlab")).args(args).output().expect("ctlab runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("scenario.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_1D: &str = r#"{
  "name": "small",
  "grid": {"dim": 1, "n": 64},
  "pair": {
    "f": {"family": "uniform_box", "lo": [0.0], "hi": [1.0]},
    "g": {"family": "uniform_box", "lo": [0.25], "hi": [0.75]}
  },
  "sigma": {"method": "quadrature", "t_nodes": 32},
  "lambdas": [0.5, 1, 2, 5],
  "seed": 1
}"#;

#[test]
fn run_writes_report_sweep_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_1D);
    let out = dir.path().join("out");
    let result = ctlab(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    for file in ["report.json", "sweep.csv", "timings.json", "sigma.csv", "lambda_1/u.csv", "lambda_1/w.csv"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["all_checks_pass"], true);
    assert_eq!(report["records"].as_array().unwrap().len(), 4);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
}

#[test]
fn invalid_config_exits_with_error_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_1D.replace("[0.5, 1, 2, 5]", "[-1]"));
    let result = ctlab(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&result.stderr).contains("lambda"));
}

#[test]
fn missing_config_exits_with_error_code() {
    let result = ctlab(&["w1", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn failed_check_exits_with_one() {
    // A gap tolerance no solver can meet.
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL_1D.replace("\"seed\": 1", "\"seed\": 1, \"checks\": {\"max_relative_gap\": 0.0}");
    let cfg = write_config(dir.path(), &body);
    let result = ctlab(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(1), "{}", String::from_utf8_lossy(&result.stdout));
}

#[test]
fn w1_subcommand_prints_json() {
    let result = ctlab(&["w1", "--config", config("oracle_1d.json").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0));
    let value: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
    assert!((value["w1"].as_f64().unwrap() - 0.125).abs() < 1e-9);
    assert_eq!(value["method"], "cdf_1d");
}

#[test]
fn sigma_subcommand_reports_bound() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sigma.csv");
    let result =
        ctlab(&["sigma", "--config", config("oracle_1d.json").to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0));
    let value: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
    assert_eq!(value["within_bound"], true);
    assert!(csv.exists());
}

#[test]
fn check_suites_pass() {
    for suite in ["duality", "phi", "traffic", "sigma"] {
        let result = ctlab(&["check", "--suite", suite, "--seed", "3"]);
        assert_eq!(result.status.code(), Some(0), "suite {suite}: {}", String::from_utf8_lossy(&result.stdout));
    }
}
