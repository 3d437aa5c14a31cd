use std::path::Path;
use std::process::{Command, Output};

use slicesort::cli::{parse_args, Command as Cmd, Task};
use slicesort::encoder::StrategyKind;
use slicesort::{AttentionKind, Error};

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn run(list: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicesort"))
        .args(list)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn file_entries_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "# experiment\nattention=slicesort strategy=interleave\nseed = 3\ntask = listops\n",
    );
    let parsed = parse_args(&args(&["train", "--config", &cfg])).unwrap();
    assert_eq!(parsed.command, Cmd::Train);
    assert_eq!(parsed.attention, AttentionKind::SliceSort);
    assert_eq!(parsed.strategy, StrategyKind::Interleave);
    assert_eq!(parsed.task, Task::ListOps);
    assert_eq!(parsed.seed, 3);
    let overridden = parse_args(&args(&["train", &format!("--config={cfg}"), "--seed=7"])).unwrap();
    assert_eq!(overridden.seed, 7);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "attnetion=softmax\n");
    let msg = parse_args(&args(&["train", "--config", &cfg])).unwrap_err().to_string();
    assert!(msg.contains("attnetion"), "{msg}");
    assert!(msg.contains("attention") && msg.contains("valid keys"), "{msg}");

    let err = parse_args(&args(&["train", "--epochs=many"])).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("epochs")));
    let err = parse_args(&args(&["train", "--attention=linear"])).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("slicesort")));
    let err = parse_args(&args(&["train", "--task=idx", "--idx_images=a", "--idx_labels=b"])).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("idx_test_images")));
    let missing = dir.path().join("absent.cfg");
    let err = parse_args(&args(&["train", "--config", missing.to_str().unwrap()])).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn unknown_command_prints_usage() {
    let out = run(&["trian"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("usage:") && stderr.contains("trian"), "{stderr}");
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train", "--bogus=1"]).status.code(), Some(1));
}

#[test]
fn gradcheck_default_passes() {
    let out = run(&["gradcheck"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    for op in ["matmul", "softmax_rows", "slice_sort(ascending)", "model(slicesort)"] {
        assert!(stdout.contains(op), "{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn smoothing_default_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = format!("--out_dir={}", dir.path().display());
    let out = run(&["smoothing", &out_dir]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("smoothing.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "N,mean_std");
    assert_eq!(lines.len(), 7);
    let ns: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["10", "100", "1000", "10000", "100000", "1000000"]);
}

#[test]
fn train_writes_log_and_reruns_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = format!("--out_dir={}", dir.path().display());
    let flags = [
        "train",
        &out_dir,
        "--train_samples=24",
        "--test_samples=8",
        "--seq_len=12",
        "--epochs=2",
        "--batch_size=8",
    ];
    for _ in 0..2 {
        assert_eq!(run(&flags).status.code(), Some(0));
    }
    let csv = std::fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,train_acc,test_acc,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    let entries: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, ["training_log.csv"]);
}

#[test]
fn runtime_failure_exits_2() {
    let out = run(&["train", "--seq_len=12", "--n_classes=9", "--epochs=1"]);
    assert_eq!(out.status.code(), Some(2));
}
