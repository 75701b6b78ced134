#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Plant 3 of every default synthetic crop.
pub const HOLD_OUT: &str = "mustard:3,radish:3,wheat:3";

pub fn phenofuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phenofuse"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PHENOFUSE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

/// Runs the binary and returns stdout, or an error naming the command and its stderr.
pub fn run_ok(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = phenofuse(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`phenofuse {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}
