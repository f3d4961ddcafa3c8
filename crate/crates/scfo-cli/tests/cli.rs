//! End-to-end checks of the command-line interface.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scfo"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("scfo-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn run_writes_trace_and_reports_loss() {
    let out = tmp("run.csv");
    let status = bin()
        .args([
            "run", "--problem", "B", "--algo", "it", "--kf", "20", "--seed", "3", "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("loss="), "stdout: {stdout}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("k,u1,u2,phi_true,g1_true,g2_true,g3_true,phi_meas"));
    assert_eq!(text.lines().count(), 22); // header + 21 records
}

#[test]
fn identical_seeds_write_identical_bytes() {
    let a = tmp("det_a.csv");
    let b = tmp("det_b.csv");
    for out in [&a, &b] {
        let status = bin()
            .args([
                "run", "--problem", "B", "--impl", "III", "--sigma", "0.3", "--sigma-g",
                "0.01", "--kf", "25", "--seed", "11", "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_file_campaign_runs() {
    let cfg = tmp("c.toml");
    std::fs::write(
        &cfg,
        r#"
            [problem]
            builtin = "B"

            [campaign]
            algo = "gd"
            implementation = "II"
            sigma = 0.1
            kf = 15
            seed = 2
        "#,
    )
    .unwrap();
    let out = tmp("from_config.csv");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.exists());
}

#[test]
fn table_summarizes_traces() {
    let out = tmp("for_table.csv");
    assert!(bin()
        .args(["run", "--problem", "B", "--kf", "10", "--seed", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let output = bin().arg("table").arg(&out).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("file,rows,phi_final"));
    assert!(stdout.contains("for_table.csv,11,"));
}

#[test]
fn bad_flags_are_rejected() {
    let out = bin()
        .args(["run", "--problem", "Z", "--out", "/tmp/never.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args(["run", "--algo", "nope", "--out", "/tmp/never.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
