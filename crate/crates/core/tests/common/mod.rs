#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn hsln<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_hsln"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs and insists on exit 0.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let r = hsln(args);
    assert_eq!(r.code, 0, "stdout:\n{}\nstderr:\n{}", r.stdout, r.stderr);
    r
}

pub fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Grammar corpus written by `make-synthetic`.
pub fn synthetic(dir: &Path, name: &str, abstracts: usize, seed: u64, positional: Option<f64>) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "make-synthetic".to_string(),
        "--out".into(),
        p(&path),
        "--abstracts".into(),
        abstracts.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--id-prefix".into(),
        format!("{name}-"),
    ];
    if let Some(q) = positional {
        args.push("--positional".into());
        args.push(q.to_string());
    }
    ok(&args);
    path
}

pub struct Trained {
    pub ckpt: PathBuf,
    pub log: String,
    pub stdout: String,
}

pub fn train(dir: &Path, tag: &str, train: &Path, val: &Path, extra: &[&str]) -> Trained {
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let mut args = vec!["train".to_string(), "--train".into(), p(train), "--val".into(), p(val), "--out".into(), p(&ckpt)];
    args.extend(extra.iter().map(|s| s.to_string()));
    let r = ok(&args);
    let log = fs::read_to_string(dir.join(format!("{tag}.ckpt.log"))).unwrap();
    Trained {
        ckpt,
        log,
        stdout: r.stdout,
    }
}

/// Weighted F1 in percent from `evaluate`.
pub fn evaluate(ckpt: &Path, test: &Path) -> f64 {
    let r = ok(&["evaluate", "--model", &p(ckpt), "--test", &p(test)]);
    hsln::metrics::parse_report(&r.stdout).unwrap().weighted_f1
}

/// `key=value` fields of a log line.
pub fn fields(line: &str) -> Vec<(&str, &str)> {
    line.split_whitespace().filter_map(|f| f.split_once('=')).collect()
}

pub fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    fields(line).into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
}
