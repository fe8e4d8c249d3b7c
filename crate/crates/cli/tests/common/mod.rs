#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Systems and maps shared by the CLI tests and the README walkthrough.
pub const CONFIG: &str = include_str!("../../../../configs/demo.json");

pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

/// Runs the binary in `dir` with `args`.
pub fn fbinv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbinv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}
