#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn salguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salguide"))
        .args(args)
        .env("SALGUIDE_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = salguide(args);
    assert!(
        out.status.success(),
        "salguide {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn code(args: &[&str]) -> i32 {
    salguide(args).status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two classes, ten training images each, small val and target splits.
pub fn tiny_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&[
        "gen-data", "--out", s(&data), "--seed", "0", "--classes", "2", "--n-per-class", "10",
        "--val-per-class", "5", "--test-per-class", "5",
    ]);
    data
}

/// Every file below `dir` with its bytes, sorted by path.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub const GOLDEN: &str = "tests/golden/tiny_metrics.csv";

/// Trains the tiny fixed configuration and returns its metrics CSV.
pub fn tiny_run(root: &Path) -> String {
    let data = tiny_data(root);
    let runs = root.join("runs");
    ok(&[
        "train", "--mode", "xai", "--seed", "0", "--data", s(&data), "--out", s(&runs), "--epochs", "3", "--freq", "2",
        "--lr", "0.01", "--batch-size", "8", "--run-id", "tiny",
    ]);
    fs::read_to_string(runs.join("tiny/metrics.csv")).unwrap()
}
