#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssm-lab"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Last stdout line, which every command prints as JSON.
pub fn json(out: &Output) -> serde_json::Value {
    let text = stdout(out);
    let line = text.lines().last().expect("output");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

pub fn digits_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits")
}

pub fn digits_data_section() -> String {
    let d = digits_dir();
    format!(
        "[data]\nsource = \"idx\"\ntrain_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\n",
        d.join("train-images-idx3-ubyte"),
        d.join("train-labels-idx1-ubyte"),
        d.join("test-images-idx3-ubyte"),
        d.join("test-labels-idx1-ubyte"),
    )
}

pub fn synthetic_section(classes: usize, train: usize, test: usize, size: usize) -> String {
    format!(
        "[data]\nsource = \"synthetic\"\nclasses = {classes}\ntrain_per_class = {train}\ntest_per_class = {test}\nsize = {size}\n"
    )
}

/// Writes `body` as `name` in `dir` and returns its path.
pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// Small CNN on 2-class synthetic blobs; `train_overrides` are `key = value`
/// lines replacing or extending the `[train]` defaults below.
pub fn small_synthetic_config(dir: &Path, out: &str, train_overrides: &str) -> PathBuf {
    let mut train: Vec<(String, String)> = ["epochs = 3", "batch_size = 16", "milestones = [2]", "augment_pad = 1"]
        .iter()
        .chain(train_overrides.lines().collect::<Vec<_>>().iter())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let mut seen = std::collections::HashSet::new();
    train.reverse();
    train.retain(|(k, _)| seen.insert(k.clone()));
    train.reverse();
    let train: String = train.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let body = format!(
        "seed = 4\nout_dir = {out:?}\n[model]\nwidths = [8, 16]\nnum_heads = 4\n[train]\n{train}{}",
        synthetic_section(2, 24, 12, 8)
    );
    write_config(dir, &format!("{out}.toml"), &body)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(width, height, pixels)` of a binary PGM.
pub fn parse_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let text_end = bytes
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .expect("pgm header");
    let header = std::str::from_utf8(&bytes[..text_end]).unwrap();
    let mut parts = header.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    assert_eq!(parts.next(), Some("255"));
    let pixels = bytes[text_end..].to_vec();
    assert_eq!(pixels.len(), w * h);
    (w, h, pixels)
}
