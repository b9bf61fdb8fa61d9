//! End-to-end tests of the installed binary: exit codes and output files.

use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stein-select"))
}

#[test]
fn successful_toy_run_exits_zero_and_writes_outputs() {
    let out = tempfile::tempdir().unwrap();
    let status = binary()
        .args([
            "toy",
            "--scenario",
            "nested_ms",
            "--scores",
            "svc",
            "--n-grid",
            "100",
            "--seeds",
            "0..1",
            "--t",
            "5",
            "--policy",
            "perdim:5",
            "--plot",
            "--out",
        ])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.path().join("results.csv").exists());
    assert!(out.path().join("config.json").exists());
    assert!(out.path().join("plot_nested_ms_svc.svg").exists());

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("config.json")).unwrap())
            .unwrap();
    assert_eq!(config["command"], "toy");
    assert_eq!(config["t"], 5.0);
}

#[test]
fn config_errors_exit_two() {
    let out = tempfile::tempdir().unwrap();
    for args in [
        vec!["toy", "--scenario", "bogus"],
        vec!["toy", "--scenario", "ds", "--scores", "k_e"],
        vec!["toy", "--scenario", "ds", "--policy", "nope:1"],
        vec!["ppca-sim", "--scenario", "C"],
        vec!["calibrate", "--model", "unknown"],
        vec![
            "select",
            "--input",
            "x.csv",
            "--model",
            "glass",
            "--latent-dim",
            "2",
        ],
    ] {
        let status = binary()
            .args(&args)
            .arg("--out")
            .arg(out.path())
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(2), "args {args:?}");
    }
    // Unknown flags are also configuration errors (clap exits 2 itself).
    let status = binary()
        .args(["toy", "--scenario", "ds", "--frobnicate"])
        .arg("--out")
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn io_errors_exit_four() {
    let out = tempfile::tempdir().unwrap();
    let status = binary()
        .args([
            "select",
            "--input",
            "/nonexistent/missing.csv",
            "--model",
            "ppca",
            "--latent-dim",
            "2",
            "--out",
        ])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn malformed_csv_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "1.0,2.0,3.0\n4.0,NaN,6.0\n7.0,8.0,9.0\n").unwrap();
    let out = binary()
        .args(["select", "--input"])
        .arg(&csv)
        .args(["--model", "ppca", "--latent-dim", "1", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("row 2") && stderr.contains("column 2"),
        "{stderr}"
    );
}
