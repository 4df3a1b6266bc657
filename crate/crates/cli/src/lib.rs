//! `deferlab`: verification suites and expert-count sweeps driven by a flat
//! TOML config, writing CSV artifacts.
//!
//! Exit codes: 0 when every check passes, 1 when a check or a training run
//! fails, 2 on usage or configuration errors.

pub mod commands;
pub mod config;
pub mod error;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Clone, Debug, Parser)]
#[command(name = "deferlab", version, about = "Multi-expert learning-to-defer verification and sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML config; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads; 0 or unset uses every core.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Closed-form risks against Monte-Carlo estimates, and the PiCCE weight identity.
    VerifyRisks,
    /// Consistency of PiCCE minimizers and the Condition 1 suite.
    VerifyConsistency,
    /// Train every surrogate over the expert-count list.
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::VerifyRisks => "verify-risks",
            Command::VerifyConsistency => "verify-consistency",
            Command::Sweep => "sweep",
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

/// Loads and resolves the config, echoes it into the output directory and
/// runs the command.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        config.out_dir = Some(out.clone());
    }
    let config = config.resolve(cli.command)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    pool.install(|| commands::run(cli.command, &config))
}

/// [`execute`] with errors reported on stderr, returning the exit code.
pub fn run(cli: &Cli) -> u8 {
    match execute(cli) {
        Ok(outcome) => {
            eprintln!("{}: {}", cli.command.name(), outcome.summary);
            u8::from(!outcome.passed)
        }
        Err(e) => {
            eprintln!("deferlab {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
