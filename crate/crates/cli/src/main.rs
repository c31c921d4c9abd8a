//! `symbranch`: experiment runner for the symbiotic branching laboratory.
//!
//! Usage: `symbranch <kind> --config <path> [--seed N] [--out DIR]
//! [--format csv|json]`. Exit codes: 0 success, 2 usage error, 3 violated
//! precondition, 4 numerical blowup. Failures emit one machine-readable
//! JSON record on stderr.

mod config;
mod output;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use symbranch_core::SimError;

use crate::config::{ExperimentConfig, ExperimentKind, OutputFormat};

#[derive(Debug)]
pub enum CliError {
    /// Malformed invocation or config; also covers filesystem failures.
    Usage(String),
    /// Propagated simulation error; the variant decides the exit code.
    Sim(SimError),
    /// A numeric output cell was NaN or infinite.
    NonFinite(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        CliError::Sim(SimError::precondition(msg.into()))
    }

    pub fn non_finite(file: &str, column: &str, row: usize) -> Self {
        CliError::NonFinite(format!(
            "non-finite value in {file} output, column `{column}`, row {row}"
        ))
    }

    pub fn non_finite_report(name: &str, path: String) -> Self {
        CliError::NonFinite(format!("non-finite value in {name} report at {path}"))
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Sim(SimError::Blowup { .. }) => "blowup",
            CliError::Sim(_) => "precondition",
            CliError::NonFinite(_) => "blowup",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" => 2,
            "precondition" => 3,
            _ => 4,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Sim(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::NonFinite(msg) => f.write_str(msg),
            CliError::Sim(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "symbranch",
    about = "Stochastic laboratory for finite- and infinite-rate symbiotic branching"
)]
struct Args {
    /// Experiment kind; must match the config's `kind` field.
    kind: String,
    /// Config file (.json or .toml); schema is identical for both.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's `format` (csv or json).
    #[arg(long)]
    format: Option<String>,
}

fn execute(args: &Args) -> Result<Vec<PathBuf>, CliError> {
    let kind = ExperimentKind::parse(&args.kind)?;
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.kind != kind {
        return Err(CliError::usage(format!(
            "experiment kind `{}` does not match the config's `kind` field",
            args.kind
        )));
    }
    // Overrides are applied before the header is built, so output files
    // embed the resolved values actually used.
    if let Some(seed) = args.seed {
        config.model.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.clone());
    }
    if let Some(format) = &args.format {
        config.format = OutputFormat::parse(format)?;
    }
    runner::run(&config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(paths) => {
            for path in paths {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
