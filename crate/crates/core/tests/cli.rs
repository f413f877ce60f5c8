//! The `mccl` binary: exit codes and a small synth → train → infer → eval run.

use std::path::Path;
use std::process::{Command, Output};

fn mccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mccl")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mccl(&["--bogus"]).status.code(), Some(1));
    assert_eq!(mccl(&["synth"]).status.code(), Some(1));
    assert_eq!(mccl(&[]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = mccl(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "train", "infer", "eval", "gradcheck", "bench"] {
        assert!(text.contains(cmd), "help lists {cmd}");
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mccl");
    let out = mccl(&["infer", "--checkpoint", path(&missing), "--images", path(dir.path()), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = mccl(&["synth", "--groups", "3", "--per-group", "3", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "odd group size is rejected");
}

#[test]
fn synth_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mccl(&["synth", "--groups", "2", "--per-group", "4", "--size", "32", "--seed", "3", "--out", path(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for sub in ["images/circle", "gts/circle"] {
        assert_eq!(std::fs::read_dir(data.join(sub)).unwrap().count(), 4);
    }
    assert!(data.join("manifest.tsv").is_file());

    let run = dir.path().join("run");
    let out = mccl(&[
        "train", "--data", path(&data), "--out", path(&run), "--epochs", "1",
        "--set", "image_size=32", "--set", "channels=4,8,16,32", "--set", "group_cap=4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.mccl").is_file());
    assert!(run.join("train_log.tsv").is_file());

    let pred = dir.path().join("pred");
    let out = mccl(&["infer", "--checkpoint", path(&run.join("checkpoint.mccl")), "--images", path(&data), "--out", path(&pred)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let tsv = dir.path().join("scores.tsv");
    let out = mccl(&["eval", "--pred", path(&pred), "--gt", path(&data.join("gts")), "--tsv", path(&tsv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(&tsv).unwrap();
    assert!(table.lines().count() >= 2);
}
