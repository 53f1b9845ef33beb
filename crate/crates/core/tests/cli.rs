mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use pqk::metrics::HEADER;

use common::*;

fn pqk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pqk")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Trains the toy config once into `dir/run`.
fn toy_run(dir: &Path) -> std::path::PathBuf {
    let config = write_config(dir, &toy_config(1));
    let out = dir.join("run");
    let o = pqk(&["train", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn toy_training_run_is_quick_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = toy_run(dir.path());
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in ["metrics.csv", "phase1.ckpt", "phase2.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(HEADER));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &toy_config(1));
    let o = pqk(&["train", "--config", s(&config), "--phase", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--resume"));
    assert_eq!(pqk(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(pqk(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn phase_two_resumes_from_a_phase_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = toy_run(dir.path());
    let config = dir.path().join("config.json");
    let out = dir.path().join("resumed");
    let p1 = run.join("phase1.ckpt");
    let o = pqk(&["train", "--config", s(&config), "--phase", "2", "--resume", s(&p1), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(run.join("phase2.ckpt")).unwrap();
    let b = std::fs::read(out.join("phase2.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_prints_accuracy_and_guards_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let run = toy_run(dir.path());
    let o = pqk(&["eval", "--ckpt", s(&run.join("phase2.ckpt")), "--path", "teacher"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let v: f64 = text.trim().strip_prefix("accuracy=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    let o = pqk(&[
        "eval",
        "--ckpt",
        s(&run.join("phase1.ckpt")),
        "--data",
        "synthetic:two-spirals:n=40:seed=9",
    ]);
    assert!(stdout(&o).starts_with("accuracy="));
    let o = pqk(&["eval", "--ckpt", s(&run.join("phase1.ckpt")), "--path", "teacher"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = toy_run(dir.path());
    let ckpt = run.join("phase2.ckpt");
    let o = pqk(&["inspect", "--ckpt", s(&ckpt)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("sparsity"));
    assert!(text.contains("fc0"));
    let file = dir.path().join("model.pqkx");
    let o = pqk(&["export", "--ckpt", s(&ckpt), "--out", s(&file)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(file.exists());
}

#[test]
fn missing_and_corrupt_checkpoints_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(pqk(&["inspect", "--ckpt", s(&missing)]).status.code(), Some(3));
    let run = toy_run(dir.path());
    let mut bytes = std::fs::read(run.join("phase1.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 1;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(pqk(&["eval", "--ckpt", s(&bad)]).status.code(), Some(3));
}

#[test]
fn finetune_with_zero_budget_copies_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = toy_run(dir.path());
    let p1 = run.join("phase1.ckpt");
    let out = dir.path().join("ft");
    let o = pqk(&["finetune", "--resume", s(&p1), "--lr", "0.01", "--budget", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(out.join("finetune.ckpt")).unwrap());
}

#[test]
fn finetune_sweep_writes_comparable_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = toy_run(dir.path());
    let p1 = run.join("phase1.ckpt");
    let mut headers = Vec::new();
    for lr in ["0.1", "0.01", "0.001"] {
        let out = dir.path().join(format!("ft-{lr}"));
        let o = pqk(&["finetune", "--resume", s(&p1), "--lr", lr, "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        headers.push(csv.lines().next().unwrap().to_string());
        assert!(csv.lines().any(|l| l.contains(",finetune,") && l.contains(",accuracy,")));
    }
    assert!(headers.iter().all(|h| h == HEADER));
}
