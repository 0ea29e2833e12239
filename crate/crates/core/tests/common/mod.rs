#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_cvfc"))
}

pub fn cvfc(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
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

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn tiny_backbone(kind: &str) -> Value {
    let stage = |name: &str, c: usize| {
        json!({"name": name, "blocks": 1, "out_channels": c, "stride": 2, "block_kind": kind})
    };
    json!({
        "stem_channels": 4,
        "stages": [stage("s1", 4), stage("s2", 8), stage("s3", 8)],
        "tap_names": ["s1", "s2", "s3"],
    })
}

/// A small co-trained model that trains in well under a second per epoch
/// on 16×16 patches.
pub fn tiny_config(epochs: usize) -> Value {
    json!({
        "seed": 5,
        "epochs": epochs,
        "lr": 0.01,
        "batch_size": 4,
        "model": {
            "branches": [tiny_backbone("basic"), tiny_backbone("bottleneck"), tiny_backbone("basic")],
        },
    })
}

pub fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
