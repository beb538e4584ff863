//! Front end for the `lrlm` binary.
//!
//! Every invocation gets its own run directory `<runs-dir>/<unix-time>-<seed>`
//! holding `report.json` and any artifacts (checkpoints, metrics). The
//! report is a pure function of the inputs: it carries no timings and names
//! files inside the run directory by their relative path, so two runs with
//! the same arguments write byte-identical reports.

pub mod args;
pub mod checkpoint;
pub mod config;
pub mod error;
mod exec;
mod plan;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::{json, Value};

pub use args::{Cli, Command, PlanCommand};
pub use error::{CliError, Result};

/// What a command produced.
#[derive(Debug, Default)]
pub struct Output {
    /// Human-readable summary for stdout.
    pub text: String,
    /// Machine-readable result stored under `result` in the report.
    pub result: Value,
    /// Extra files written into the run directory.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

/// Where a command may place its files.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(root: &Path, seed: u64) -> Result<Self> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let base = root.join(format!("{ts}-{seed}"));
        let mut path = base.clone();
        let mut n = 1;
        while path.exists() {
            path = PathBuf::from(format!("{}-{n}", base.display()));
            n += 1;
        }
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// `explicit` if given, else `default_name` inside the run directory.
    pub fn output(&self, explicit: Option<&Path>, default_name: &str) -> PathBuf {
        explicit.map_or_else(|| self.path.join(default_name), Path::to_path_buf)
    }

    /// How a path is recorded in the report: relative when it lies inside
    /// the run directory.
    pub fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.path)
            .map_or_else(|_| p.display().to_string(), |r| r.display().to_string())
    }
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Pretrain(_) => "pretrain".into(),
        Command::Decompose(_) => "decompose".into(),
        Command::Finetune(_) => "finetune".into(),
        Command::Quantize(_) => "quantize".into(),
        Command::Merge(_) => "merge".into(),
        Command::Infer(_) => "infer".into(),
        Command::Gradcheck(_) => "gradcheck".into(),
        Command::Plan { what } => {
            let w = match what {
                PlanCommand::Params(_) => "params",
                PlanCommand::Mem(_) => "mem",
                PlanCommand::Flops(_) => "flops",
                PlanCommand::Pipeline(_) => "pipeline",
                PlanCommand::Shard(_) => "shard",
                PlanCommand::Federated(_) => "federated",
            };
            format!("plan {w}")
        }
    }
}

/// The config file a command reads, if any.
fn config_path(c: &Command) -> Option<&Path> {
    match c {
        Command::Pretrain(a) => a.config.as_deref(),
        Command::Finetune(a) => a.config.as_deref(),
        Command::Plan { what } => match what {
            PlanCommand::Params(a) => a.model.config.as_deref(),
            PlanCommand::Mem(a) => a.model.config.as_deref(),
            PlanCommand::Flops(a) => a.model.config.as_deref(),
            PlanCommand::Pipeline(a) => a.config.as_deref(),
            PlanCommand::Shard(a) => a.model.config.as_deref(),
            PlanCommand::Federated(a) => a.model.config.as_deref(),
        },
        _ => None,
    }
}

/// `--seed`, else the config's training seed, else 0.
pub fn effective_seed(cli: &Cli) -> u64 {
    cli.seed
        .or_else(|| {
            let cfg = config::ExperimentConfig::load(config_path(&cli.command)?).ok()?;
            cfg.train.map(|t| t.seed)
        })
        .unwrap_or(0)
}

fn dispatch(cli: &Cli, seed: u64, run: &RunDir) -> Result<Output> {
    match &cli.command {
        Command::Plan { what } => plan::run(what),
        Command::Pretrain(a) => exec::pretrain(a, seed, run),
        Command::Decompose(a) => exec::decompose(a, run),
        Command::Finetune(a) => exec::finetune(a, seed, run),
        Command::Quantize(a) => exec::quantize(a, run),
        Command::Merge(a) => exec::merge(a, run),
        Command::Infer(a) => exec::infer(a),
        Command::Gradcheck(a) => exec::gradcheck(a, seed),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs a parsed command, writes its run directory and returns the exit
/// status together with the run directory path.
pub fn execute(cli: &Cli) -> (i32, Option<PathBuf>) {
    let seed = effective_seed(cli);
    let run = match RunDir::create(&cli.runs_dir, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return (e.exit_code(), None);
        }
    };
    let mut report = json!({
        "command": command_name(&cli.command),
        "seed": seed,
        "inputs": serde_json::to_value(&cli.command).expect("arguments serialize"),
    });
    let code = match dispatch(cli, seed, &run) {
        Ok(out) => {
            for (name, bytes) in &out.artifacts {
                let p = run.path().join(name);
                if let Err(e) = fs::write(&p, bytes) {
                    eprintln!("error: {}", CliError::io(&p, e));
                    return (1, Some(run.path));
                }
            }
            report["status"] = json!("ok");
            report["result"] = out.result;
            let _ = std::io::stdout().write_all(out.text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            report["status"] = json!("error");
            report["error"] = json!(e.to_string());
            e.exit_code()
        }
    };
    report["exit_code"] = json!(code);
    if let Err(e) = write_json(&run.path().join("report.json"), &report) {
        eprintln!("error: {e}");
        return (1, Some(run.path));
    }
    eprintln!("run directory: {}", run.path().display());
    (code, Some(run.path))
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// exit with 1, `--help`/`--version` with 0.
pub fn main_entry<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli).0,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}
