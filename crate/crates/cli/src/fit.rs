//! `estimate` and `diagnose`: fit one method to a CSV dataset.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use nalgebra::DVector;

use cbps_core::design::{linear_terms, parse_function_spec, render_function_spec, BalanceSpec, CovariateFunction};
use cbps_core::estimators::{
    att_from_probabilities, fit_att, fit_glm_ate, fit_ocbps_sieve, fit_outcomes, iptw, aipw, EstimandKind,
};
use cbps_core::gmm::{FitResult, GmmOptions, MomentSystem, Weighting};
use cbps_core::inference::{
    var_aipw, var_att, var_cbps, var_glm, var_ocbps, var_true, var_vopt_plugin, BalanceDiagnostics, EstimateReport,
    Method, OcbpsForm, OutcomePlugIn, VarianceEstimate,
};
use cbps_core::propensity::{Link, PropensityModel, PI_CLIP};
use cbps_core::simulation::format_sig;

use crate::data::{self, CsvDataset};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimandArg {
    Ate,
    Att,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Identity,
    TwoStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
    Csv,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV file with columns t, y and covariates.
    #[arg(long)]
    pub data: PathBuf,
    /// true | glm | cbps | ocbps | ocbps-sieve | aipw
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long, value_enum, default_value = "ate")]
    pub estimand: EstimandArg,
    /// Functions balanced between arms (oCBPS) / control outcome basis.
    #[arg(long)]
    pub h1: Option<String>,
    /// Functions matched from weighted treated to controls (oCBPS) / effect basis.
    #[arg(long)]
    pub h2: Option<String>,
    /// CBPS balancing functions (default: the propensity covariate map).
    #[arg(long)]
    pub f: Option<String>,
    /// Propensity covariate map (default: 1,x1..xd; h1 then h2 for oCBPS).
    #[arg(long)]
    pub map: Option<String>,
    /// Column holding known probabilities (method true).
    #[arg(long)]
    pub pi_column: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value = "two-step")]
    pub weighting: WeightingArg,
}

/// A fitted method with what `diagnose` needs besides the report.
pub struct Fitted {
    pub report: EstimateReport,
    pub pi: Vec<f64>,
    pub residual_labels: Vec<String>,
    pub balance: Option<BalanceSpec>,
}

fn functions(text: &str, flag: &str) -> Result<Vec<CovariateFunction>, CliError> {
    parse_function_spec(text).map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

fn labels(prefix: &str, fns: &[CovariateFunction]) -> Vec<String> {
    fns.iter().map(|f| format!("{prefix}:{f}")).collect()
}

fn diagnostics(fit: &FitResult) -> BalanceDiagnostics {
    BalanceDiagnostics {
        moment_residuals: fit.residual.iter().copied().collect(),
        max_residual: fit.max_residual(),
        clip_events: fit.clip_events,
        iterations: fit.iterations,
        converged: fit.converged,
    }
}

impl FitArgs {
    fn gmm_options(&self) -> GmmOptions {
        let weighting = match self.weighting {
            WeightingArg::Identity => Weighting::Identity,
            WeightingArg::TwoStep => Weighting::TwoStep,
        };
        GmmOptions::default().with_weighting(weighting)
    }

    fn map(&self, d: usize, fallback: Vec<CovariateFunction>) -> Result<Vec<CovariateFunction>, CliError> {
        match &self.map {
            Some(text) => functions(text, "map"),
            None => Ok(if fallback.is_empty() { linear_terms(d, true) } else { fallback }),
        }
    }

    /// oCBPS blocks; both flags are mandatory.
    fn ocbps_spec(&self) -> Result<BalanceSpec, CliError> {
        let h1 = self.h1.as_deref().ok_or_else(|| CliError::Usage(format!("--h1 is required for method {}", self.method)))?;
        let h2 = self.h2.as_deref().ok_or_else(|| CliError::Usage(format!("--h2 is required for method {}", self.method)))?;
        BalanceSpec::new(functions(h1, "h1")?, functions(h2, "h2")?).map_err(CliError::from)
    }

    /// Outcome plug-in bases, defaulting to `1,x1..xd` for both blocks.
    fn outcome_spec(&self, d: usize) -> Result<BalanceSpec, CliError> {
        let default = render_function_spec(&linear_terms(d, true));
        let h1 = functions(self.h1.as_deref().unwrap_or(&default), "h1")?;
        let h2 = functions(self.h2.as_deref().unwrap_or(&default), "h2")?;
        BalanceSpec::new(h1, h2).map_err(CliError::from)
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::Usage(format!("--level {} must lie in (0,1)", self.level)));
        }
        if self.method == Method::True && self.pi_column.is_none() {
            return Err(CliError::Usage("method true needs --pi-column".into()));
        }
        if self.estimand == EstimandArg::Att && !matches!(self.method, Method::True | Method::Glm | Method::Cbps) {
            return Err(CliError::Usage(format!("estimand att supports methods true, glm and cbps, not {}", self.method)));
        }
        Ok(())
    }
}

fn glm_score(data: &CsvDataset, model: &impl PropensityModel, pi: &[f64]) -> Result<Vec<f64>, CliError> {
    let s = &data.sample;
    let q = model.coefficients().len();
    let mut score = DVector::zeros(q);
    for i in 0..s.n() {
        let b: Vec<f64> = model.covariate_map().iter().map(|f| f.eval_unchecked(s.row(i))).collect();
        score += DVector::from_vec(b) * (s.treatment()[i] - pi[i]);
    }
    Ok((score / s.n() as f64).iter().copied().collect())
}

pub fn run_fit(args: &FitArgs) -> Result<(CsvDataset, Fitted), CliError> {
    args.validate()?;
    let data = data::load(&args.data, if args.method == Method::True { args.pi_column.as_deref() } else { None })?;
    let fitted = fit(args, &data)?;
    Ok((data, fitted))
}

fn fit(args: &FitArgs, data: &CsvDataset) -> Result<Fitted, CliError> {
    let s = &data.sample;
    let d = s.d();
    let gmm = args.gmm_options();
    let estimand = match args.estimand {
        EstimandArg::Ate => EstimandKind::Ate,
        EstimandArg::Att => EstimandKind::Att,
    };
    let mut labels_out = Vec::new();
    let mut balance = None;
    let (point, variance, pi, diag): (f64, VarianceEstimate, Vec<f64>, BalanceDiagnostics) =
        match (estimand, args.method) {
            (EstimandKind::Ate, Method::True) => {
                let pi = data.pi.clone().expect("loaded with a probability column");
                (iptw(s, &pi)?, var_true(s, &pi)?, pi, BalanceDiagnostics { converged: true, ..Default::default() })
            }
            (EstimandKind::Ate, Method::Glm) | (EstimandKind::Ate, Method::Aipw) => {
                let map = args.map(d, Vec::new())?;
                let (model, pi, mu) = fit_glm_ate(s, &map)?;
                let residuals = glm_score(data, &model, &pi)?;
                labels_out = labels("score", &map);
                let max_residual = residuals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                let diag = BalanceDiagnostics { moment_residuals: residuals, max_residual, converged: true, ..Default::default() };
                if args.method == Method::Glm {
                    (mu, var_glm(s, &model)?, pi, diag)
                } else {
                    let spec = args.outcome_spec(d)?;
                    let fits = fit_outcomes(s, &spec)?;
                    let point = aipw(s, &pi, &fits, &spec)?;
                    (point, var_aipw(s, &pi, &fits, &spec, point)?, pi, diag)
                }
            }
            (EstimandKind::Ate, Method::Cbps) => {
                let map = args.map(d, Vec::new())?;
                let f = match &args.f {
                    Some(text) => functions(text, "f")?,
                    None => map.clone(),
                };
                let system = MomentSystem::cbps(s, &f, &map, Link::Logit)?;
                let fit = system.solve(&gmm)?;
                let pi = system.propensities(&fit.beta_hat)?.pi;
                let plug = OutcomePlugIn::empirical(s, &pi)?;
                labels_out = labels("f", &f);
                (iptw(s, &pi)?, var_cbps(s, &system, &fit.beta_hat, &plug)?, pi, diagnostics(&fit))
            }
            (EstimandKind::Ate, Method::Ocbps) => {
                let spec = args.ocbps_spec()?;
                let map = args.map(d, spec.union())?;
                let system = MomentSystem::ocbps(s, &spec, &map, Link::Logit)?;
                let fit = system.solve(&gmm)?;
                let pi = system.propensities(&fit.beta_hat)?.pi;
                let fits = fit_outcomes(s, &spec)?;
                let v = var_ocbps(s, &system, &fit.beta_hat, &fits, OcbpsForm::Sandwich)?;
                labels_out = [labels("h1", spec.h1()), labels("h2", spec.h2())].concat();
                balance = Some(spec);
                (iptw(s, &pi)?, v, pi, diagnostics(&fit))
            }
            (EstimandKind::Ate, Method::OcbpsSieve) => {
                let spec = args.ocbps_spec()?;
                let basis = match &args.map {
                    Some(text) => Some(functions(text, "map")?),
                    None => None,
                };
                let fit = fit_ocbps_sieve(s, &spec, basis.as_deref(), Link::Logit, &gmm)?;
                let fits = fit_outcomes(s, &spec)?;
                let plug = OutcomePlugIn::from_fits(s, &fits, &spec)?;
                let v = var_vopt_plugin(s, &fit.pi, &plug, fit.estimate)?;
                labels_out = [labels("h1", spec.h1()), labels("h2", spec.h2())].concat();
                balance = Some(spec);
                (fit.estimate, v, fit.pi, diagnostics(&fit.fit))
            }
            (EstimandKind::Att, method) => {
                let spec = args.outcome_spec(d)?;
                let plug = OutcomePlugIn::from_fits(s, &fit_outcomes(s, &spec)?, &spec)?;
                let (tau, pi, diag) = match method {
                    Method::True => {
                        let pi = data.pi.clone().expect("loaded with a probability column");
                        (att_from_probabilities(s, &pi)?.0, pi, BalanceDiagnostics { converged: true, ..Default::default() })
                    }
                    Method::Glm => {
                        let (model, pi, _) = fit_glm_ate(s, &args.map(d, Vec::new())?)?;
                        let residuals = glm_score(data, &model, &pi)?;
                        labels_out = labels("score", model.covariate_map());
                        let max_residual = residuals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                        let diag =
                            BalanceDiagnostics { moment_residuals: residuals, max_residual, converged: true, ..Default::default() };
                        (att_from_probabilities(s, &pi)?.0, pi, diag)
                    }
                    _ => {
                        let map = args.map(d, Vec::new())?;
                        let f = match &args.f {
                            Some(text) => functions(text, "f")?,
                            None => map.clone(),
                        };
                        let fit = fit_att(s, &f, &map, &gmm)?;
                        labels_out = labels("f", &f);
                        (fit.tau, fit.pi.clone(), diagnostics(&fit.fit))
                    }
                };
                (tau, var_att(s, &pi, &plug, tau)?, pi, diag)
            }
        };
    let mut diag = diag;
    if diag.clip_events == 0 {
        diag.clip_events = pi.iter().filter(|&&p| p <= PI_CLIP || p >= 1.0 - PI_CLIP).count();
    }
    let report = EstimateReport::new(estimand, args.method, s.n(), point, variance, args.level, diag)?;
    Ok(Fitted { report, pi, residual_labels: labels_out, balance })
}

pub fn render_report(report: &EstimateReport, format: OutputFormat) -> Result<String, CliError> {
    Ok(match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| CliError::Usage(e.to_string()))?;
            s.push('\n');
            s
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| CliError::Usage(e.to_string());
            w.write_record(["estimand", "method", "n", "estimate", "std_error", "ci_low", "ci_high", "variance", "max_residual", "iterations"])
                .map_err(io)?;
            let estimand = match report.estimand {
                EstimandKind::Ate => "ate",
                EstimandKind::Att => "att",
            };
            w.write_record([
                estimand.to_string(),
                report.method.to_string(),
                report.n.to_string(),
                format_sig(report.point),
                format_sig(report.std_error),
                format_sig(report.ci_low),
                format_sig(report.ci_high),
                format_sig(report.variance),
                format_sig(report.diagnostics.max_residual),
                report.diagnostics.iterations.to_string(),
            ])
            .map_err(io)?;
            String::from_utf8(w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?).expect("csv output is UTF-8")
        }
        OutputFormat::Text => {
            let mut out = String::new();
            let estimand = match report.estimand {
                EstimandKind::Ate => "ATE",
                EstimandKind::Att => "ATT",
            };
            let _ = writeln!(out, "method         {}", report.method);
            let _ = writeln!(out, "estimand       {estimand}");
            let _ = writeln!(out, "n              {}", report.n);
            let _ = writeln!(out, "estimate       {:?}", report.point);
            let _ = writeln!(out, "std. error     {:?}", report.std_error);
            let _ = writeln!(out, "{:.0}% CI         [{:?}, {:?}]", report.level * 100.0, report.ci_low, report.ci_high);
            if report.variance_floored {
                let _ = writeln!(out, "warning        variance plug-in was negative and floored at 0");
            }
            let d = &report.diagnostics;
            if !d.moment_residuals.is_empty() {
                let _ = writeln!(out, "max residual   {:.3e}", d.max_residual);
                let _ = writeln!(out, "iterations     {}", d.iterations);
            }
            let _ = writeln!(out, "clipped units  {}", d.clip_events);
            out
        }
    })
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

pub fn render_diagnostics(data: &CsvDataset, fitted: &Fitted) -> String {
    let s = &data.sample;
    let n = s.n() as f64;
    let pi = &fitted.pi;
    let mut out = String::new();
    let r = &fitted.report;
    let _ = writeln!(out, "method {}  n={}  converged={}  iterations={}", r.method, r.n, r.diagnostics.converged, r.diagnostics.iterations);

    if !r.diagnostics.moment_residuals.is_empty() {
        let _ = writeln!(out, "\nmoment residuals");
        for (label, v) in fitted.residual_labels.iter().zip(&r.diagnostics.moment_residuals) {
            let _ = writeln!(out, "  {label:<16} {v:>14.6e}");
        }
    }

    let _ = writeln!(out, "\nweighted covariate means (treated: T/pi, control: (1-T)/(1-pi))");
    let _ = writeln!(out, "  {:<16} {:>14} {:>14} {:>14}", "covariate", "treated", "control", "difference");
    for (j, name) in data.covariate_names.iter().enumerate() {
        let (mut t_mean, mut c_mean) = (0.0, 0.0);
        for i in 0..s.n() {
            let (t, x) = (s.treatment()[i], s.row(i)[j]);
            t_mean += t * x / pi[i];
            c_mean += (1.0 - t) * x / (1.0 - pi[i]);
        }
        let (t_mean, c_mean) = (t_mean / n, c_mean / n);
        let position = format!("x{}", j + 1);
        let label = if *name == position { position } else { format!("{position} ({name})") };
        let _ = writeln!(out, "  {label:<16} {t_mean:>14.6} {c_mean:>14.6} {:>14.6e}", t_mean - c_mean);
    }

    if let Some(spec) = fitted.balance.as_ref().filter(|b| b.m2() > 0) {
        let _ = writeln!(out, "\nh2 matching (treated weighted by (1-pi)/pi vs unweighted controls, sums)");
        let _ = writeln!(out, "  {:<16} {:>14} {:>14} {:>14}", "function", "treated", "control", "difference");
        for f in spec.h2() {
            let (mut treated, mut control) = (0.0, 0.0);
            for i in 0..s.n() {
                let v = f.eval_unchecked(s.row(i));
                if s.is_treated(i) {
                    treated += (1.0 - pi[i]) / pi[i] * v;
                } else {
                    control += v;
                }
            }
            let _ = writeln!(out, "  {:<16} {treated:>14.6} {control:>14.6} {:>14.6e}", f.to_string(), treated - control);
        }
    }

    let mut sorted = pi.clone();
    sorted.sort_by(f64::total_cmp);
    let _ = writeln!(out, "\nfitted propensity quantiles");
    for (label, p) in [("min", 0.0), ("5%", 0.05), ("25%", 0.25), ("50%", 0.5), ("75%", 0.75), ("95%", 0.95), ("max", 1.0)] {
        let _ = writeln!(out, "  {label:<5} {:.6}", quantile(&sorted, p));
    }
    let _ = writeln!(out, "\nclipped units {}", r.diagnostics.clip_events);
    out
}
