use std::path::PathBuf;
use std::process::Command;

use fab_core::harness::{run_experiment, ExperimentConfig, SweepSpec};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fab")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn config_path(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

#[test]
fn example_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            if path.file_name().unwrap().to_string_lossy().starts_with("sweep") {
                SweepSpec::load(&path).unwrap().validate().unwrap();
            } else {
                ExperimentConfig::load(&path, &[]).unwrap().validate().unwrap();
            }
            seen += 1;
        }
    }
    assert!(seen >= 5);
}

/// Metrics CSV with the wall-clock column removed.
fn without_timing(csv: &str) -> String {
    let col = csv.lines().next().unwrap().split(',').position(|h| h == "wall_time_s").unwrap();
    csv.lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != col).map(|(_, v)| v).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn identical_configs_give_identical_metrics() {
    let path = configs().join("rl_ablation.toml");
    let cfg = ExperimentConfig::load(&path, &["iterations=400".into()]).unwrap();
    let a = without_timing(&run_experiment(&cfg).unwrap().csv());
    let b = without_timing(&run_experiment(&cfg).unwrap().csv());
    assert!(a.lines().count() > 2);
    assert_eq!(a, b);
    let other = ExperimentConfig::load(&path, &["iterations=400".into(), "seed=2".into()]).unwrap();
    assert_ne!(a, without_timing(&run_experiment(&other).unwrap().csv()));
}

#[test]
fn selftest_exits_zero() {
    let (code, out) = fab(&["selftest"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_string_lossy().into_owned();
    let (code, out) = fab(&[
        "run",
        &config_path("quadratic_fab.toml"),
        "--set",
        "iterations=200",
        "--out",
        &d,
        "--plot",
        "consensus_x",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("iterations_run 200"));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("k,hypergrad_norm_sq,"));
    assert!(dir.path().join("summary.txt").exists());
    assert!(dir.path().join("lyapunov.csv").exists());
    assert!(dir.path().join("quadratic_fab_consensus_x.dat").exists());
}

#[test]
fn exit_codes() {
    let (code, _) = fab(&["run", &config_path("quadratic_fab.toml"), "--set", "iterations=0"]);
    assert_eq!(code, 1);
    let (code, _) = fab(&["run", &config_path("quadratic_fab.toml"), "--set", "noise_kind=\"observation\""]);
    assert_eq!(code, 1);
    let (code, out) = fab(&[
        "run",
        &config_path("quadratic_fab.toml"),
        "--set",
        "steps.normalize=false",
        "--set",
        "steps.eta_x=5.0",
        "--set",
        "steps.eta_y=5.0",
        "--set",
        "steps.eta_z=5.0",
    ]);
    assert_eq!(code, 2, "{out}");
    assert!(out.contains("divergence iteration="));
}

#[test]
fn validate_topology_reports_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_string_lossy().into_owned();
    let (code, out) = fab(&["validate-topology", &config_path("ring_weighted.toml"), "--dump", &d]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("status pass"));
    assert!(dir.path().join("A_0.csv").exists());
    let (code, _) = fab(&["validate-topology", &config_path("ring_weighted.toml"), "--set", "topology.a_min_target=0.5"]);
    assert_eq!(code, 1);
}
