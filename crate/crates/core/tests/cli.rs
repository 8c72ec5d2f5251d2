use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fwdguess::cli::parse_method_spec;
use fwdguess::estimators::Method;
use fwdguess::orthogonalize::StepPolynomialBank;

fn fwdguess(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwdguess"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn overlap_rows(path: &Path) -> Vec<(usize, usize, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,k,overlap"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn train_then_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let out = fwdguess(
        &[
            "train", "--method", "w_perp", "--k", "10", "--width", "128", "--epochs", "1", "--synthetic", "--seed", "0",
            "--out", "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("step,layer,bias,variance,cov_fro,"));
    assert!(dir.path().join("run/config.json").is_file());

    // output-adjacent layer: W̃ is 10 x 128, rank 10
    let out = fwdguess(
        &["overlap", "--checkpoint", "run/final.ckpt", "--layer", "3", "--out", "o.csv", "--samples", "64"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = overlap_rows(&dir.path().join("o.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.0 == 3));
    assert_eq!(rows.iter().map(|r| r.1).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert!(rows.windows(2).all(|w| w[1].2 >= w[0].2));
    assert!(rows[9].2 >= 0.99);
}

#[test]
fn fit_ns_writes_nine_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = fwdguess(&["fit-ns", "--out", "bank.json"], dir.path());
    assert!(out.status.success());
    let bank = StepPolynomialBank::load(&dir.path().join("bank.json")).unwrap();
    assert_eq!(bank.entries().len(), 9);
    assert!(bank.entries().iter().all(|e| e.max_dev_high <= 0.1 && e.max_dev_low <= 0.1));
}

#[test]
fn gen_data_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = fwdguess(
        &["gen-data", "--out-dir", "d", "--num-train", "200", "--num-test", "50", "--format", "bin"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = fwdguess(
        &[
            "sweep", "--methods", "backprop,w_perp:2", "--hidden", "8", "--seeds", "0,1", "--epochs", "1",
            "--batch-size", "64", "--data", "d/train.bin", "--test-data", "d/test.bin", "--no-wall-time", "--out",
            "sw",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(dir.path().join("sw/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let summary = fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("w_perp(k=2),8,2,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = fwdguess(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));

    let unknown = fwdguess(&["train", "--method", "backprop", "--bogus"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));

    let bad_method = fwdguess(&["train", "--method", "sgd", "--synthetic"], dir.path());
    assert_eq!(bad_method.status.code(), Some(1));

    let missing = fwdguess(
        &["train", "--method", "backprop", "--data", "nope.csv", "--test-data", "nope.csv", "--epochs", "1"],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.csv"));
}

#[test]
fn method_specs() {
    assert_eq!(parse_method_spec("w_perp:10").unwrap(), Method::WPerp { k: 10 });
    assert_eq!(parse_method_spec("w_precond:0.001").unwrap(), Method::WPrecond { sigma: 0.001 });
    assert_eq!(parse_method_spec("w_transpose").unwrap(), Method::WTranspose);
    assert!(parse_method_spec("w_perp").is_err());
    assert!(parse_method_spec("w_perp:x").is_err());
}
