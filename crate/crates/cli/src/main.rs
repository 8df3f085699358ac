use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod data;
mod fit;
mod simulate;

use fit::{FitArgs, OutputFormat};
use simulate::{GenerateArgs, SimulateArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cbps_core::Error),
    #[error("more than 5% of replications failed for at least one estimator")]
    InvalidSummary,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use cbps_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::NonConvergence { .. } | E::SingularDesign(_) | E::Evaluation(_) | E::Degenerate(_)) => 3,
            CliError::Core(_) => 2,
            CliError::InvalidSummary => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cbps", version, about = "Covariate balancing propensity score estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a treatment effect from a CSV dataset.
    Estimate {
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, value_enum, default_value = "text")]
        out: OutputFormat,
    },
    /// Fit a method and report balance diagnostics.
    Diagnose {
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Run a seeded Monte Carlo study.
    Simulate(SimulateArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate { fit, out } => {
            let (_, fitted) = fit::run_fit(&fit)?;
            print!("{}", fit::render_report(&fitted.report, out)?);
            Ok(())
        }
        Command::Diagnose { fit } => {
            let (data, fitted) = fit::run_fit(&fit)?;
            print!("{}", fit::render_diagnostics(&data, &fitted));
            Ok(())
        }
        Command::Simulate(args) => simulate::run_simulate(&args),
        Command::Generate(args) => simulate::run_generate(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let CliError::Core(cbps_core::Error::NonConvergence { best_beta, .. }) = &err {
                eprintln!("best coefficients: {best_beta:?}");
            }
            ExitCode::from(err.exit_code())
        }
    }
}
