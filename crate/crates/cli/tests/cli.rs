//! End-to-end checks of the binary's exit codes and light commands.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smoothinv"))
}

#[test]
fn verify_gradients_exits_zero_and_prints_checks() {
    let out = bin()
        .args(["verify-gradients", "--instances", "200"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 7);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn gen_data_writes_csv_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-data", "--alpha", "0.0", "--seed", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("data.csv").exists());
    assert!(dir.path().join("data_provenance.json").exists());
}

#[test]
fn evaluate_without_artifacts_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["evaluate", "--alpha", "0.0", "--seed", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_file_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&path)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn confidence_grid_rejects_bad_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "confidence-grid",
            "--alpha",
            "0.0",
            "--seed",
            "1",
            "--resolution",
            "1",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
