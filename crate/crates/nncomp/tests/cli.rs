//! The binary's file-level subcommands.

use std::process::Command;

use nncomp::store::{self, Policy};
use nncomp_core::train::init_model;
use nncomp_core::zoo;

fn nncomp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nncomp"))
}

#[test]
fn size_reports_raw_and_compressed_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.nncm");
    let model = init_model(&zoo::build("mnist_student").unwrap(), 1).unwrap();
    let bytes = store::save_model(&model, &Policy::Auto).unwrap();
    std::fs::write(&path, &bytes).unwrap();
    let out = nncomp().args(["size", "--input"]).arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(&format!("raw {} bytes", bytes.len())), "{text}");
}

#[test]
fn report_builds_tables_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rows.csv");
    std::fs::write(&input, "pipeline,accuracy,size_mb,efficacy,acc_delta_pct,size_delta_pct\nbase,97.5,6,16.25,,\npruned,98,2,49,,\n").unwrap();
    let csv = dir.path().join("out.csv");
    let out = nncomp().args(["report", "--baseline", "base", "--input"]).arg(&input).arg("--out").arg(&csv).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("| pruned | +0.51 | -67 |"));
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.lines().nth(2).unwrap().starts_with("pruned,98,2,49,0.51282051282"), "{rows}");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = nncomp().args(["size", "--input", "/nonexistent.nncm"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.nncm"));
    let bad = nncomp().args(["report", "--input", "/dev/null", "--baseline", "x"]).output().unwrap();
    assert!(!bad.status.success());
    let unknown = nncomp().args(["train", "--dataset", "svhn"]).output().unwrap();
    assert!(!unknown.status.success());
}
