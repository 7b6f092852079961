//! Drives the `hermit` binary through a small simulate / fit / evaluate run.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn hermit(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hermit")).args(args).output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "hermit {args:?} failed:\n{text}");
    text
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_fit_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    hermit(&["simulate", "--preset", "low-dim", "--n", "120", "--seed", "4", "--out", p(&sim)]);
    for f in ["train.csv", "valid.csv", "test.csv", "tasks.json", "truth.json"] {
        assert!(sim.join(f).exists(), "{f} missing");
    }

    let fit = dir.path().join("fit");
    let (train, tasks, test) = (sim.join("train.csv"), sim.join("tasks.json"), sim.join("test.csv"));
    hermit(&["fit", "--train", p(&train), "--tasks", p(&tasks), "--k", "2", "--lambda", "0.05", "--out", p(&fit)]);
    let report = json(&fit.join("fit_report.json"));
    let trace: Vec<f64> =
        report["objective_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(trace.len() >= 2);
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-8));
    let trace_csv = std::fs::read_to_string(fit.join("objective_trace.csv")).unwrap();
    assert_eq!(trace_csv.lines().count(), trace.len() + 1);
    let rho = std::fs::read_to_string(fit.join("responsibilities.csv")).unwrap();
    assert_eq!(rho.lines().count(), 121);

    let model = fit.join("model.json");
    let eval = dir.path().join("eval");
    hermit(&["evaluate", "--model", p(&model), "--test", p(&test), "--tasks", p(&tasks), "--out", p(&eval)]);
    let metrics = json(&eval.join("metrics.json"));
    let text = metrics.to_string();
    assert!(text.contains("nmse") && text.contains("aauc"), "{text}");

    let pred = dir.path().join("pred");
    hermit(&["predict", "--model", p(&model), "--test", p(&test), "--out", p(&pred)]);
    let rows = std::fs::read_to_string(pred.join("predictions.csv")).unwrap();
    assert_eq!(rows.lines().count(), 121);

    let scores = dir.path().join("scores");
    hermit(&["score-tasks", "--model", p(&model), "--test", p(&train), "--tasks", p(&tasks), "--out", p(&scores)]);
    assert!(scores.join("task_scores.csv").exists());
}

#[test]
fn robust_fit_writes_outlier_scores() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    hermit(&["simulate", "--preset", "low-dim", "--n", "80", "--seed", "1", "--out", p(&sim)]);
    let out = dir.path().join("robust");
    let (train, tasks) = (sim.join("train.csv"), sim.join("tasks.json"));
    hermit(&[
        "detect-outliers", "--train", p(&train), "--tasks", p(&tasks), "--robust", "--lambda2", "0.05", "--p-clean",
        "0.05", "--t-out", "10", "--out", p(&out),
    ]);
    let scores = std::fs::read_to_string(out.join("outlier_scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 81);
    assert!(out.join("removed.json").exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_hermit"))
        .args(["fit", "--train", "/nonexistent.csv", "--tasks", "/nonexistent.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = Command::new(env!("CARGO_BIN_EXE_hermit")).args(["replicate", "--protocol", "nope"]).output().unwrap();
    assert!(!out.status.success());
}
