//! `rice` — command-line front end for the region-aware
//! cluster-discrimination pipeline.
//!
//! Subcommands cover the full loop: `synth` generates a deterministic blob
//! dataset (manifest + region features), `cluster` fits centroids and
//! pseudo-labels the manifest, `train` runs the region encoder against the
//! margin classifier, `check` audits gradients and masked attention against
//! reference oracles, and `inspect` summarizes a checkpoint on sample
//! images.
//!
//! Exit codes: 0 success, 1 failed verification check, 2 configuration or
//! validation problem, 3 runtime numeric failure. Every output file is
//! refused if it already exists unless `--force` is given, and all commands
//! are deterministic given their flags and `--seed`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] rice_core::Error),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Overwrite(PathBuf),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(rice_core::Error::Io(e))
    }
}

impl CliError {
    /// Process exit class: 1 check failure, 2 config/validation, 3 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(rice_core::Error::Numeric(_)) => 3,
            CliError::ChecksFailed { .. } => 1,
            _ => 2,
        }
    }
}

pub type CmdResult = std::result::Result<(), CliError>;

/// Stdout style for command summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Human-readable lines.
    Text,
    /// One machine-readable JSON object.
    Json,
}

/// Flags shared by every subcommand.
#[derive(Debug, clap::Args)]
pub struct Globals {
    /// Base RNG seed; overrides the config file's `seed`.
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Flat `key = value` config file mirroring the train configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Cap the worker-thread count (never changes results).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Summary output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    /// Root directory for default input/output paths.
    #[arg(
        long,
        global = true,
        env = "RICE_DATA_DIR",
        default_value = ".",
        value_name = "DIR"
    )]
    pub data_dir: PathBuf,
}

impl Globals {
    /// The run seed: the `--seed` flag, else the config file's `seed` key,
    /// else 0.
    pub fn effective_seed(&self) -> std::result::Result<u64, CliError> {
        if let Some(seed) = self.seed {
            return Ok(seed);
        }
        if let Some(path) = &self.config {
            let mut probe = rice_core::trainer::TrainConfig::default();
            config::apply_config_file(path, &mut probe)?;
            return Ok(probe.seed);
        }
        Ok(0)
    }
}

#[derive(Parser)]
#[command(
    name = "rice",
    version,
    about = "Region-aware cluster discrimination: synthesize data, fit centroids, train, audit, inspect"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    globals: Globals,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset: region manifest + feature file.
    Synth(commands::synth::SynthArgs),
    /// Fit centroids to region features and pseudo-label the manifest.
    Cluster(commands::cluster::ClusterArgs),
    /// Train the region encoder and margin classifier on a manifest.
    Train(commands::train::TrainArgs),
    /// Audit gradients and masked attention against reference oracles.
    Check(commands::check::CheckArgs),
    /// Summarize a checkpoint: token distances and region accuracy.
    Inspect(commands::inspect::InspectArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.globals.threads {
        let built = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
        if let Err(e) = built {
            eprintln!("error: could not configure {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth(args) => commands::synth::run(args, &cli.globals),
        Command::Cluster(args) => commands::cluster::run(args, &cli.globals),
        Command::Train(args) => commands::train::run(args, &cli.globals),
        Command::Check(args) => commands::check::run(args, &cli.globals),
        Command::Inspect(args) => commands::inspect::run(args, &cli.globals),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        let numeric = CliError::Core(rice_core::Error::numeric("boom"));
        assert_eq!(numeric.exit_code(), 3);
        let config = CliError::Core(rice_core::Error::config("bad"));
        assert_eq!(config.exit_code(), 2);
        let io: CliError = rice_core::Error::from(std::io::Error::other("gone")).into();
        assert_eq!(io.exit_code(), 2);
        let check = CliError::ChecksFailed { failed: 1, total: 6 };
        assert_eq!(check.exit_code(), 1);
        let clobber = CliError::Overwrite(PathBuf::from("x"));
        assert_eq!(clobber.exit_code(), 2);
    }
}
