use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedgp::config::{load_config, SCENARIOS};
use fedgp::experiment::{self, configure_threads};
use fedgp::Result;

/// Federated Gaussian-process regression experiments.
#[derive(Parser)]
#[command(name = "fedgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write trace.csv, summary.csv and config.echo.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of repeats (overrides `repeats`).
        #[arg(long)]
        repeats: Option<usize>,
        /// Master seed; repeat r uses seed + r (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a single baseline of a multi-fidelity config.
    Eval {
        config: PathBuf,
        #[arg(long, value_enum)]
        baseline: BaselineArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the built-in scenario keys.
    ListScenarios,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Separate,
}

fn prepare(
    path: &PathBuf,
    out: Option<PathBuf>,
    repeats: Option<usize>,
    seed: Option<u64>,
) -> Result<(fedgp::config::ExperimentConfig, PathBuf)> {
    let mut config = load_config(path)?;
    if let Some(r) = repeats {
        config.repeats = r;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let dir = out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("fedgp-out"));
    config.output_dir = Some(dir.clone());
    Ok((config, dir))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ListScenarios => {
            for (key, about) in SCENARIOS {
                println!("{key:<18} {about}");
            }
        }
        Command::Run { config, out, repeats, seed } => {
            configure_threads()?;
            let (config, dir) = prepare(&config, out, repeats, seed)?;
            experiment::run_experiment(&config, &dir)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Eval { config, baseline: BaselineArg::Separate, out, repeats, seed } => {
            configure_threads()?;
            let (config, dir) = prepare(&config, out, repeats, seed)?;
            experiment::run_separate_baseline(&config, &dir)?;
            eprintln!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
