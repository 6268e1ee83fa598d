//! `fmgp`: train, evaluate and inspect feature-map Gaussian processes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! error. Failures print a JSON object to stderr.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fmgp_core::parallel::THREADS_ENV;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "fmgp", version, about = "Feature-map Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write model JSON, loss trace and timings.
    Train(Common),
    /// Evaluate a saved model on the test split.
    Eval(Common),
    /// Write Gram spectra for the configured kernels as CSV.
    Spectral(Common),
    /// Run the dense-oracle equivalence batteries.
    OracleCheck(Common),
}

fn check_threads() -> Result<(), CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !matches!(v.trim().parse::<usize>(), Ok(t) if t > 0) => {
            Err(CliError::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> commands::CmdResult {
    check_threads()?;
    let (common, cmd): (&Common, fn(&RunConfig) -> commands::CmdResult) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Eval(c) => (c, commands::eval),
        Command::Spectral(c) => (c, commands::spectral),
        Command::OracleCheck(c) => (c, commands::oracle_check),
    };
    let cfg = RunConfig::load(&common.config)?.with_overrides(common.seed, common.out.clone());
    cfg.validate()?;
    cmd(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::config(e.to_string().trim()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
