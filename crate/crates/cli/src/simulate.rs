//! `simulate` and `generate`: Monte Carlo runs and synthetic datasets.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use cbps_core::inference::Method;
use cbps_core::simulation::{format_sig, replication_rng, run_monte_carlo, DgpSpec, McSummary, Scenario, X1Spread};

use crate::data;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpreadArg {
    /// N(3, 2) has variance 2.
    Variance,
    /// N(3, 2) has standard deviation 2.
    Sd,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario name (both-correct, ps-misspecified, ps-local,
    /// outcome-misspecified, both-misspecified) or a JSON config file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long, value_enum)]
    pub x1_spread: Option<SpreadArg>,
}

impl ScenarioArgs {
    pub fn spec(&self) -> Result<DgpSpec, CliError> {
        let mut spec = match self.scenario.parse::<Scenario>() {
            Ok(scenario) => DgpSpec::new(scenario, 1000, 0.0),
            Err(_) => read_config(Path::new(&self.scenario))?,
        };
        if let Some(n) = self.n {
            spec.n = n;
        }
        if let Some(beta1) = self.beta1 {
            spec.beta1 = beta1;
        }
        if let Some(spread) = self.x1_spread {
            spec.x1_spread = match spread {
                SpreadArg::Variance => X1Spread::Variance,
                SpreadArg::Sd => X1Spread::Sd,
            };
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn read_config(path: &Path) -> Result<DgpSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("`{}` is neither a scenario name nor a readable config: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated methods.
    #[arg(long, default_value = "true,glm,cbps,ocbps")]
    pub estimators: String,
    /// Write the summary CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_estimators(text: &str) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let m: Method = token.parse().map_err(|e: cbps_core::Error| CliError::Usage(format!("--estimators: {e}")))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Usage("--estimators is empty".into()));
    }
    Ok(methods)
}

pub fn summary_csv(summary: &McSummary) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Usage(e.to_string());
    w.write_record(["estimator", "bias", "sd", "rmse", "coverage", "failures"]).map_err(err)?;
    for row in &summary.rows {
        w.write_record([
            row.method.as_str().to_string(),
            format_sig(row.bias),
            format_sig(row.sd),
            format_sig(row.rmse),
            format_sig(row.coverage),
            row.failures.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let spec = args.scenario.spec()?;
    let methods = parse_estimators(&args.estimators)?;
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let summary = run_monte_carlo(&spec, &methods, args.reps, args.seed)?;
    if let Some(path) = &args.out {
        std::fs::write(path, summary_csv(&summary)?)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    }
    print!("{}", summary.text_table());
    if summary.invalid {
        return Err(CliError::InvalidSummary);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Add the true propensity as a `pi` column.
    #[arg(long)]
    pub with_pi: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let spec = args.scenario.spec()?;
    let draw = spec.draw_with_rng(&mut replication_rng(args.seed, 0))?;
    data::write_sample(&args.out, &draw.sample, args.with_pi.then_some(draw.pi_true.as_slice()))
}
