use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(config: &Value, dir: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(config).unwrap()).unwrap();
    let out = dir.join("out");
    let output = Command::new(env!("CARGO_BIN_EXE_liouville"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    (output, out)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn twisted(pipeline: &str, counts: usize) -> Value {
    json!({
        "pipeline": pipeline,
        "model": {"n": 2, "family": "twisted", "parameters": {"eps": 0.1}},
        "foliation": {"kind": "oracle"},
        "leaf_grid": {"lo": [0.35, 0.35], "hi": [0.65, 0.65], "counts": [counts, counts]},
        "q_resolution": 32,
        "integrator": {"method": "implicit_midpoint", "step": 2e-3},
        "rotation": {"horizon": 64},
        "tolerances": {"rotation": 1e-5},
        "sampling": {"times": [1.0, std::f64::consts::SQRT_2], "coordinate_samples": 4}
    })
}

fn fix_c(q_resolution: usize) -> Value {
    json!({
        "pipeline": "c0check",
        "tuple": {
            "expressions": ["p1+sin(2*pi*q2)", "p2"],
            "window": {"p_lo": [-1, -1], "p_hi": [1, 1]},
            "q_resolution": q_resolution,
            "p_resolution": 3
        }
    })
}

#[test]
fn analyze_twisted_model_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (output, out) = run(&twisted("analyze", 7), dir.path(), &[]);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let s = summary(&out);
    assert_eq!(s["pass"], true);
    assert!(s["max_conjugation_defect"].as_f64().unwrap() <= 1e-5);
    assert!(s["max_rotation_gradient_discrepancy"].as_f64().unwrap() <= 1e-5);
    for file in [
        "rotation.csv",
        "conjugacy.csv",
        "a_function.csv",
        "metadata.json",
    ] {
        assert!(out.join(file).is_file(), "{file} missing");
    }
    let rotation = std::fs::read_to_string(out.join("rotation.csv")).unwrap();
    assert_eq!(rotation.lines().next(), Some("a1,a2,rho1,rho2,err"));
    assert_eq!(rotation.lines().count(), 50);
}

#[test]
fn c0check_reports_noncommuting_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (output, out) = run(&fix_c(32), dir.path(), &[]);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let s = summary(&out);
    let sup = s["bracket_sup"].as_f64().unwrap();
    assert!((sup - 2.0 * std::f64::consts::PI).abs() < 1e-9, "{sup}");
    let csv = std::fs::read_to_string(out.join("brackets.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("j,k,sup"));
}

#[test]
fn non_power_of_two_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (output, out) = run(&fix_c(100), dir.path(), &[]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("BadGrid"));
    assert!(!out.join("summary.json").exists());

    let mut cfg = twisted("rotation", 3);
    cfg["q_resolution"] = json!(100);
    let (output, _) = run(&cfg, dir.path(), &[]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn failed_tolerance_exits_two_and_names_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = twisted("rotation", 3);
    cfg["tolerances"]["rotation"] = json!(1e-14);
    let (output, out) = run(&cfg, dir.path(), &[]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.starts_with("validation failed: max_rotation_error"),
        "{stderr}"
    );
    assert_eq!(summary(&out)["pass"], false);
}

#[test]
fn summary_is_byte_identical_across_runs_and_threads() {
    let cfg = twisted("conjugacy", 3);
    let mut texts = Vec::new();
    for threads in ["1", "2", "1"] {
        let dir = tempfile::tempdir().unwrap();
        let (output, out) = run(&cfg, dir.path(), &["--threads", threads]);
        assert!(
            output.status.success(),
            "{}",
            String::from_utf8_lossy(&output.stderr)
        );
        texts.push(std::fs::read(out.join("summary.json")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    assert_eq!(texts[0], texts[2]);
}

#[test]
fn pipeline_flag_overrides_config_and_unknown_names_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (output, out) = run(
        &twisted("analyze", 3),
        dir.path(),
        &["--pipeline", "rotation"],
    );
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(summary(&out)["pipeline"], "rotation");
    assert!(!out.join("conjugacy.csv").exists());

    let (output, _) = run(&twisted("analyze", 3), dir.path(), &["--pipeline", "plot"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn approx_ladder_shrinks_with_eps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = twisted("approx", 11);
    cfg["leaf_grid"] = json!({"lo": [0, 0], "hi": [1, 1], "counts": [11, 11]});
    cfg["approx"] = json!({
        "eps": [0.1, 0.05],
        "compact": {"c_lo": [0.3, 0.3], "c_hi": [0.7, 0.7], "c_count": 5, "x_count": 4},
        "symplecticity_samples": 50
    });
    let (output, out) = run(&cfg, dir.path(), &[]);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(out.join("ladder.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(csv.lines().next(), Some("eps,c0_err,c1_err"));
    assert_eq!(rows.len(), 2);
    assert!(rows[1][1] < rows[0][1] && rows[1][2] < rows[0][2]);
}
