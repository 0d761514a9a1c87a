// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;
mod study;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

/// Information-gain sensitivities for linear Bayesian inverse problems.
#[derive(Parser)]
#[command(name = "igsense", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of retained eigenpairs; overrides `rank` in the config.
    #[arg(long, global = true)]
    rank: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// MAP point, spectrum, and information gain at the nominal θ.
    Solve,
    /// θ-gradients of the information gain at the nominal θ.
    Sensitivity,
    /// Information gain and gradients over a grid of θ.
    Sweep,
    /// Derivative-based global sensitivity bounds.
    Gsa,
    /// Oracle and finite-difference self-checks.
    Verify,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("IGSENSE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("IGSENSE_THREADS = {value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(rank) = cli.rank {
        cfg.rank = Some(rank);
    }
    cfg.validate()?;
    let out: &Path = cli.out.as_deref().unwrap_or(&cfg.output);
    match cli.command {
        Command::Solve => commands::solve(&cfg, out),
        Command::Sensitivity => commands::sensitivity(&cfg, out),
        Command::Sweep => commands::sweep(&cfg, out),
        Command::Gsa => commands::gsa(&cfg, out),
        Command::Verify => verify::verify(&cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("igsense-error code=2 kind=usage message={:?}", e.kind().to_string());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "igsense-error code={} kind={} message={:?}",
                e.exit_code(),
                e.kind(),
                e.to_string()
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
