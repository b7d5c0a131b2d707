//! `dualhjb` command-line front end.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::RunOptions;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "dualhjb",
    version,
    about = "Dual HJB solver for investment-consumption problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Model configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the Monte Carlo seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Writes per-path traces next to the simulation report.
    #[arg(long, global = true)]
    dump_paths: bool,
    /// Upstream artifact; defaults to the file written by the previous stage in `--out`.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Solves the dual equation and writes the dual CSV.
    Solve,
    /// Recovers the primal value and feedback controls from a dual CSV.
    Recover,
    /// Simulates the closed loop under the recovered feedback.
    Simulate,
    /// Runs the full check suite.
    Verify,
    /// Runs the application sections of the config.
    App,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    let Some(config) = cli.config else {
        return Err(
            dualhjb_core::config::ConfigError::Invalid("--config is required".into()).into(),
        );
    };
    let opts = RunOptions {
        config,
        out: cli.out,
        seed: cli.seed,
        dump_paths: cli.dump_paths,
        input: cli.input,
    };
    match cli.command {
        Command::Solve => commands::solve(&opts),
        Command::Recover => commands::recover(&opts),
        Command::Simulate => commands::simulate(&opts),
        Command::Verify => commands::verify(&opts),
        Command::App => commands::app(&opts),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dualhjb: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
