//! Helpers shared by the CLI behavior tests and the acceptance suite.
#![allow(dead_code)] // not every test target uses every helper

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ssad")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawning the ssad binary")
}

pub fn assert_ok(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed (status {:?})\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

pub fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

/// Minimal fast config: 64px images, narrow encoder, no LR drops.
pub fn write_tiny_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

pub fn tiny_toml(n_images: usize, epochs: usize, seed: u64) -> String {
    format!(
        r#"
[synth]
n_images = {n_images}
image_size = 64
n_categories = 3
seed = {seed}

[train]
epochs = {epochs}
batch_size = 4
image_size = 64
encoder_width = 8
lr_drop_epochs = []
seed = {seed}
"#
    )
}

/// Synthesize a dataset through the CLI; returns the dataset directory.
pub fn synth_dataset(root: &Path, config: &Path, sub: &str) -> PathBuf {
    let dir = root.join(sub);
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "synth");
    dir
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

pub fn load_schema(name: &str) -> serde_json::Value {
    // tests run from the crate root: ../../schemas
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(name);
    read_json(&path)
}
