use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use spiked_lss_cli::commands::{run_compare, run_density, run_simulate, run_theory, Overrides};

/// Gaussian limits of linear spectral statistics for spiked sample
/// covariance matrices, with a Monte Carlo check.
#[derive(Parser)]
#[command(name = "spiked-lss", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predicted mean and covariance of the normalized statistics.
    Theory(Overrides),
    /// Monte Carlo run: report and histograms.
    Simulate(Overrides),
    /// Monte Carlo run judged against the prediction; exits 3 on a miss.
    Compare(Overrides),
    /// Limiting bulk density on a grid over its support.
    Density(Overrides),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = match &cli.command {
        Command::Theory(o) => run_theory(o),
        Command::Simulate(o) => run_simulate(o),
        Command::Compare(o) => run_compare(o),
        Command::Density(o) => run_density(o),
    };
    eprintln!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
