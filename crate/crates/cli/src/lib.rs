//! Batch experiment runner for `gptree`: base training, class and chain
//! sweeps, incremental sessions, evaluation and artifact inspection.
//!
//! Each run writes `config.json` (resolved configuration plus library
//! version), `metrics.csv` and `report.md` into its output directory. Exit
//! codes: 2 for configuration errors, 3 for data errors, 4 for numerical
//! failures.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;
pub mod synthetic;

use std::ffi::OsString;

use clap::Parser;

pub use config::{Command, Inference, RunConfig, SweepMethod};

pub const WORKERS_ENV: &str = "GPTREE_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gptree::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                gptree::ErrorKind::Config => 2,
                gptree::ErrorKind::Data => 3,
                gptree::ErrorKind::Numerical => 4,
            },
            CliError::Io(_) => 3,
        }
    }
}

fn env_workers() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        _ => Ok(None),
    }
}

/// Resolves and runs one command on a pool of the configured size.
pub fn run_config(cfg: RunConfig, command: Command) -> Result<(), CliError> {
    let cfg = cfg.resolve(command)?;
    let workers = match cfg.workers {
        Some(w) => Some(w),
        None => env_workers()?,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config("worker count must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| commands::execute(&cfg))
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (command, overrides) = cli.command.split();
    let result = overrides.into_config().and_then(|cfg| run_config(cfg, command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
