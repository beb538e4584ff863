//! Helpers for driving the `lrlm` binary from integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Run directory, when the command got far enough to create one.
    pub dir: Option<PathBuf>,
    pub report: Value,
    pub elapsed: Duration,
}

impl Run {
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }

    pub fn result(&self) -> &Value {
        &self.report["result"]
    }

    pub fn artifact(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.dir.as_ref().expect("run directory").join(name)).unwrap()
    }
}

/// Runs the binary with `--runs-dir runs` prepended.
pub fn lrlm(runs: &Path, args: &[&str]) -> Run {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_lrlm"))
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .output()
        .expect("binary runs");
    let elapsed = t0.elapsed();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let dir = stderr
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .map(PathBuf::from);
    let report = dir
        .as_ref()
        .map(|d| serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap())
        .unwrap_or(Value::Null);
    Run {
        code: out.status.code().expect("exit status"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr,
        dir,
        report,
        elapsed,
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
