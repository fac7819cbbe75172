#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn losh(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_losh"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// sha256 of every file under `root`, keyed by relative path.
pub fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
    }
    out
}

/// Short training run: 64x64 easy corpus of 4 samples, 12 steps.
pub const SMALL_TRAIN_CONFIG: &str = "\
# quick run
steps = 12
learning_rate = 0.0035
batch_size = 2
fbc_normalize = true
eval_every = 6
eval_data = eval
";

/// Runs every subcommand in `dir` with fixed seeds; returns the combined
/// stdout/stderr of each call in order.
pub fn run_pipeline(dir: &Path) -> Vec<(String, Output)> {
    fs::write(dir.join("run.cfg"), SMALL_TRAIN_CONFIG).unwrap();
    let calls: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--out", "data", "--count", "4", "--seed", "11"],
        vec!["gen-data", "--out", "eval", "--count", "2", "--seed", "12", "--difficulty", "hard"],
        vec!["shorten", "a man in a white t-shirt is walking"],
        vec!["train", "--config", "run.cfg", "--data", "data", "--out", "run"],
        vec!["train", "--config", "run.cfg", "--data", "data", "--out", "run-nolsi", "--ablation", "no-lsi"],
        vec!["eval", "--data", "eval", "--checkpoint", "run/checkpoint.losh", "--report", "report.json"],
        vec!["eval", "--data", "eval", "--oracle", "--report", "oracle.json"],
        vec!["gradcheck", "--seed", "4", "--instances", "2"],
        vec!["flow", "--video", "data/s0000", "--frame", "2", "--out", "flows"],
    ];
    calls
        .into_iter()
        .map(|args| {
            let out = losh(dir, &args);
            assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            (args.join(" "), out)
        })
        .collect()
}
