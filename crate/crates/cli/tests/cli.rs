use std::path::Path;
use std::process::{Command, Output};

fn kevd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kevd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kevd(args);
    assert!(
        out.status.success(),
        "kevd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TINY_KS: &str = r#"{"modes": 16, "spinup_steps": 200, "n_snapshots": 24}"#;

#[test]
fn staged_commands_produce_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let ks = tmp.path().join("ks.json");
    write(&ks, TINY_KS);

    let out = ok(&["simulate", "--dir", dir, "--config", ks.to_str().unwrap()]);
    assert!(out.contains("24 snapshots of 16 points"));
    ok(&["factorize", "--dir", dir, "--delays", "4", "--epsilon", "0.5", "--rank", "40", "--seed", "2"]);
    for m in ["dilution", "subsampling", "dense"] {
        ok(&["evd", "--dir", dir, "--method", m]);
        let out = ok(&["project", "--dir", dir, "--method", m, "--truncation", "10"]);
        assert!(out.contains("projection error (10 eigenfunctions)"));
    }
    for f in [
        "dataset.bin",
        "dataset.json",
        "factor.bin",
        "factor.json",
        "pivots.csv",
        "eigenvalues_dense.csv",
        "eigenvectors_subsampling.json",
        "field_dilution.csv",
        "eigenfunctions_subsampling.csv",
    ] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
    let out = ok(&["calibrate", "--dir", dir, "--delays", "4", "--seed", "1", "--refine-states", "64"]);
    assert!(out.contains("median epsilon:") && out.contains("refined epsilon:"));
    assert!(tmp.path().join("calibration.json").exists());
}

#[test]
fn run_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    write(
        &cfg,
        &format!(r#"{{"ks": {TINY_KS}, "delays": 4, "epsilon": 0.5, "rank": 50, "export_eigenfunctions": 2}}"#),
    );
    let out_dir = tmp.path().join("run");
    let out = ok(&[
        "run",
        "--seed",
        "7",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--methods",
        "dilution,subsampling",
    ]);
    assert!(out.contains("relative trace error:"));
    assert!(out.contains("dilution projection error"));
    let errors = std::fs::read(out_dir.join("errors.csv")).unwrap();
    std::fs::remove_file(out_dir.join("errors.csv")).unwrap();
    ok(&["report", "--dir", out_dir.to_str().unwrap()]);
    assert_eq!(std::fs::read(out_dir.join("errors.csv")).unwrap(), errors);

    // a manifest is accepted as a config
    let again = tmp.path().join("again");
    ok(&[
        "run",
        "--seed",
        "7",
        "--config",
        out_dir.join("manifest.json").to_str().unwrap(),
        "--output-dir",
        again.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(again.join("errors.csv")).unwrap(), errors);
}

#[test]
fn exit_codes() {
    assert!(!kevd(&["run"]).status.success());

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    write(&cfg, r#"{"rank": 0}"#);
    let out = kevd(&["run", "--seed", "0", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = kevd(&["project", "--dir", tmp.path().join("missing").to_str().unwrap(), "--method", "dilution"]);
    assert_eq!(out.status.code(), Some(2));

    let ks = tmp.path().join("ks.json");
    write(&ks, r#"{"modes": 16, "spinup_steps": 50, "n_snapshots": 4, "init_coeff": 1e12}"#);
    let out = kevd(&["simulate", "--dir", tmp.path().to_str().unwrap(), "--config", ks.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
