//! Command-line driver: `train`, `eval`, `pretrain`, `inspect` and `gen`.
//!
//! Exit codes: 0 on success, 1 on I/O or runtime failure, 2 on usage or
//! validation errors.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, RunOptions};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<pointabm::Error> for CliError {
    fn from(e: pointabm::Error) -> Self {
        use pointabm::Error;
        let code = match e {
            Error::Io(_) | Error::NonFinite { .. } => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pointabm",
    version,
    about = "Point cloud classifier with attention and bidirectional SSM blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier from scratch or from --init.
    Train(TrainArgs),
    /// Masked-autoencoder pretraining; saves an encoder-only checkpoint.
    Pretrain(TrainArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Parameter counts per module.
    Inspect(InspectArgs),
    /// Write the configured synthetic dataset as .xyz files and manifests.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set width=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed (falls back to the config, then PABM_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Save a checkpoint every N epochs.
    #[arg(long)]
    save_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = ["train", "test"], default_value = "test")]
    split: String,
    /// Print a JSON report instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn path_value(p: &std::path::Path) -> serde_json::Value {
    serde_json::Value::String(p.to_string_lossy().into_owned())
}

fn load_config(common: &Common, extra: Vec<(String, serde_json::Value)>) -> Result<RunConfig, CliError> {
    let mut overrides = common
        .set
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    overrides.extend(extra);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn train_overrides(a: &TrainArgs) -> Vec<(String, serde_json::Value)> {
    let mut o = Vec::new();
    if let Some(p) = &a.out {
        o.push(("out".into(), path_value(p)));
    }
    if let Some(e) = a.epochs {
        o.push(("epochs".into(), e.into()));
    }
    if let Some(p) = &a.init {
        o.push(("init".into(), path_value(p)));
    }
    if let Some(n) = a.save_every {
        o.push(("save_every".into(), n.into()));
    }
    o
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.common, train_overrides(&a))?;
            let seed = cfg.resolve_seed(a.common.seed)?;
            commands::train(&cfg, seed)
        }
        Command::Pretrain(a) => {
            let cfg = load_config(&a.common, train_overrides(&a))?;
            let seed = cfg.resolve_seed(a.common.seed)?;
            commands::pretrain(&cfg, seed)
        }
        Command::Eval(a) => {
            let cfg = match (&a.common.config, a.common.set.is_empty()) {
                (None, true) => None,
                _ => Some(load_config(&a.common, Vec::new())?),
            };
            commands::eval(cfg.as_ref(), &a.checkpoint, a.common.seed, a.split == "train", a.json)
        }
        Command::Inspect(a) => commands::inspect(&load_config(&a.common, Vec::new())?, a.json),
        Command::Gen(a) => {
            let extra = a.out.iter().map(|p| ("out".to_string(), path_value(p))).collect();
            commands::gen(&load_config(&a.common, extra)?)
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
