//! Exit-code contract of the command-line binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dnas"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dnas-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn missing_prerequisite_exits_with_code_3() {
    let dir = temp_dir("dep");
    let out = bin()
        .args(["--out-dir", dir.to_str().unwrap(), "search"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("teacher.dnas"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bad_configuration_exits_with_code_2() {
    let dir = temp_dir("cfg");
    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, "{\"unknown_key\": 1}").unwrap();
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
            "print-config",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn print_config_round_trips_through_the_loader() {
    let dir = temp_dir("print");
    let out = bin()
        .args(["--out-dir", dir.to_str().unwrap(), "print-config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed: dnas_harness::config::ExperimentConfig = serde_json::from_str(&text).unwrap();
    parsed.validate().unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
}
