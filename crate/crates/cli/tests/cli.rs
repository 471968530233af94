use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const F2: &str = r#"{"n": 2, "entries": [[-1, 1], [0, -1]]}"#;
const TRAPPED: &str = r#"{"n": 3, "entries": [[-2, 0, 0], [1, -1, 1], [0, 1, -1]]}"#;
const BOTTLENECK: &str = r#"{
    "n": 2, "capacities": [1, 1],
    "f0": ["0", "1"],
    "f": {"2,1": "1 - x"},
    "declared_lipschitz": {"f": {"2,1": 1}}
}"#;

fn comportal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comportal"))
        .current_dir(dir)
        .env_remove("COMPORTAL_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn workdir() -> TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("f2.json"), F2).unwrap();
    std::fs::write(d.path().join("trapped.json"), TRAPPED).unwrap();
    std::fs::write(d.path().join("bottleneck.json"), BOTTLENECK).unwrap();
    d
}

#[test]
fn check_reports_f2() {
    let d = workdir();
    let out = comportal(d.path(), &["--json", "check", "f2.json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json_of(&out);
    assert_eq!(r["schema"], "comportal.check/1");
    assert_eq!(r["seed"], 0);
    assert_eq!(r["compartmental"], true);
    assert_eq!(r["outflow_connected"], true);
    assert_eq!(r["canonical"]["is_canonical"], false);
}

#[test]
fn check_flags_a_trap() {
    let d = workdir();
    let out = comportal(d.path(), &["--json", "check", "trapped.json", "--minimal-traps"]);
    assert_eq!(out.status.code(), Some(3));
    let r = json_of(&out);
    assert_eq!(r["outflow_connected"], false);
    assert_eq!(r["trap"], serde_json::json!([2, 3]));
}

#[test]
fn canonicalize_f2_gives_f1() {
    let d = workdir();
    let out = comportal(d.path(), &["--json", "canonicalize", "f2.json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json_of(&out);
    assert_eq!(r["r"], serde_json::json!([2, 1]));
    assert_eq!(r["A"]["entries"], serde_json::json!([[-1.0, 0.0], [1.0, -1.0]]));
}

#[test]
fn certify_matrix_and_trap() {
    let d = workdir();
    let out = comportal(d.path(), &["--json", "certify", "f2.json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json_of(&out);
    assert_eq!(r["verdict"], "certified-es");
    assert_eq!(r["certificate"]["lambda"], 0.5);

    let out = comportal(d.path(), &["--json", "certify", "trapped.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json_of(&out)["verdict"], "certified-not-as");
}

#[test]
fn simulate_writes_csv() {
    let d = workdir();
    let out = comportal(d.path(), &["--horizon", "1", "simulate", "f2.json", "--x0", "1,0.5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2\n0,1,0.5\n"));
    let last = csv.lines().last().unwrap();
    let t: f64 = last.split(',').next().unwrap().parse().unwrap();
    assert!((t - 1.0).abs() < 1e-12);
}

#[test]
fn ies_on_the_bottleneck() {
    let d = workdir();
    let out = comportal(d.path(), &["--json", "ies", "bottleneck.json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json_of(&out);
    assert_eq!(r["schema"], "comportal.ies/1");
    assert!(r["s"][1].as_f64().unwrap() < 1.0);
    assert!(r["lambda"].as_f64().unwrap() > 0.0);
}

#[test]
fn trm_example_prints_lambda_and_writes_csv() {
    let d = workdir();
    let out = comportal(
        d.path(),
        &["trm", "--h", "vf*(1-x/rho_max)", "--n", "10", "--boundary-out", "0.5"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("lambda ")), "{text}");
    let csv = std::fs::read_to_string(d.path().join("trm_trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,"));
}

#[test]
fn trm_with_boundary_csv() {
    let d = workdir();
    std::fs::write(d.path().join("rho.csv"), "t,rho\n0,0.1\n50,0.3\n100,0.2\n").unwrap();
    let out = comportal(
        d.path(),
        &["--json", "--horizon", "20", "trm", "--n", "4", "--boundary-in", "rho.csv", "--h-lipschitz", "1"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_of(&out)["verdict"], "certified-ies");
}

#[test]
fn estimate_exports_with_envelope() {
    let d = workdir();
    let out = comportal(
        d.path(),
        &["--out", "run", "--horizon", "80", "--seed", "5", "estimate", "--n", "4", "--h-lipschitz", "1"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = d.path().join("run");
    let csv = std::fs::read_to_string(dir.join("estimate_error.csv")).unwrap();
    assert!(csv.starts_with("t,error,envelope\n"));
    for f in ["estimate_error.gp", "estimate_truth.csv", "estimate_estimate.csv", "report.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert!(report["crossing_time_1e-3"].as_f64().is_some());
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let d = workdir();
    let args = ["--json", "--seed", "17", "--samples", "512", "ies", "bottleneck.json"];
    let a = comportal(d.path(), &args);
    let b = comportal(d.path(), &args);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json_of(&a)["seed"], 17);
}

#[test]
fn seed_falls_back_to_env() {
    let d = workdir();
    let out = Command::new(env!("CARGO_BIN_EXE_comportal"))
        .current_dir(d.path())
        .env("COMPORTAL_SEED", "42")
        .args(["--json", "check", "f2.json"])
        .output()
        .unwrap();
    assert_eq!(json_of(&out)["seed"], 42);
}

#[test]
fn usage_errors_exit_64() {
    let d = workdir();
    assert_eq!(comportal(d.path(), &["frobnicate"]).status.code(), Some(64));
    assert_eq!(comportal(d.path(), &["certify", "--sigma", "nope", "f2.json"]).status.code(), Some(64));
    assert_eq!(comportal(d.path(), &["certify"]).status.code(), Some(64));
    assert_eq!(comportal(d.path(), &["--step", "-1", "simulate", "f2.json"]).status.code(), Some(64));
}

#[test]
fn bad_input_is_an_error_not_a_usage_error() {
    let d = workdir();
    std::fs::write(d.path().join("bad.json"), r#"{"n": 2, "entries": [[1, 0], [0, -1]]}"#).unwrap();
    let out = comportal(d.path(), &["check", "bad.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(comportal(d.path(), &["check", "missing.json"]).status.code(), Some(1));
}
