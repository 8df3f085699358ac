//! Seeded Monte Carlo driver and summary statistics.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{replication_rng, DgpSpec, Draw};
use crate::design::{linear_terms, BalanceSpec, CovariateFunction, ObservedSample};
use crate::error::{Error, Result};
use crate::estimators::{fit_glm_ate, fit_ocbps_sieve, fit_outcomes, iptw, aipw, OutcomeFits};
use crate::gmm::{GmmOptions, MomentSystem};
use crate::inference::{
    confidence_interval, var_aipw, var_cbps, var_glm, var_ocbps, var_true, var_vopt_plugin, Method, OcbpsForm,
    OutcomePlugIn, VarianceEstimate,
};
use crate::propensity::{Link, LogisticModel, PI_CLIP};

/// Failure share above which a summary is flagged invalid.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

/// Working models fitted in every replication.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingModels {
    /// Propensity covariate map.
    pub map: Vec<CovariateFunction>,
    /// CBPS balancing functions.
    pub f: Vec<CovariateFunction>,
    /// oCBPS blocks, also the outcome plug-in bases.
    pub balance: BalanceSpec,
    /// Sieve blocks; their union is the sieve basis.
    pub sieve: BalanceSpec,
}

impl Default for WorkingModels {
    fn default() -> Self {
        use CovariateFunction::{Constant, Coordinate, Square};
        let h1 = vec![Constant, Coordinate(2), Coordinate(3), Coordinate(4)];
        let h2 = vec![Coordinate(1)];
        let mut sieve_h1 = h1.clone();
        sieve_h1.extend((1..=4).map(Square));
        Self {
            map: linear_terms(4, true),
            f: linear_terms(4, true),
            balance: BalanceSpec::new(h1, h2.clone()).expect("static blocks are valid"),
            sieve: BalanceSpec::new(sieve_h1, h2).expect("static blocks are valid"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct McOptions {
    pub gmm: GmmOptions,
    pub level: f64,
    pub working: WorkingModels,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { gmm: GmmOptions::default(), level: 0.95, working: WorkingModels::default() }
    }
}

/// One estimator's result in one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepEstimate {
    pub point: f64,
    /// Asymptotic variance of `sqrt(n) (point - truth)`.
    pub variance: f64,
    pub floored: bool,
    pub ci: (f64, f64),
    pub clip_events: usize,
}

/// Results of every requested estimator on one replication.
#[derive(Debug)]
pub struct Replication {
    pub draw: Option<Draw>,
    pub estimates: Vec<(Method, Result<RepEstimate>)>,
}

struct Context<'a> {
    sample: &'a ObservedSample,
    pi_true: &'a [f64],
    options: &'a McOptions,
    fits: Option<Result<OutcomeFits>>,
    glm: Option<Result<(LogisticModel, Vec<f64>, f64)>>,
}

impl<'a> Context<'a> {
    fn fits(&mut self) -> Result<OutcomeFits> {
        let (sample, spec) = (self.sample, &self.options.working.balance);
        self.fits.get_or_insert_with(|| fit_outcomes(sample, spec)).clone()
    }

    fn glm(&mut self) -> Result<(LogisticModel, Vec<f64>, f64)> {
        let (sample, map) = (self.sample, &self.options.working.map);
        self.glm.get_or_insert_with(|| fit_glm_ate(sample, map)).clone()
    }

    fn finish(&self, point: f64, v: VarianceEstimate, clip_events: usize) -> Result<RepEstimate> {
        let ci = confidence_interval(point, v.value, self.sample.n(), self.options.level)?;
        Ok(RepEstimate { point, variance: v.value, floored: v.floored, ci, clip_events })
    }

    fn estimate(&mut self, method: Method) -> Result<RepEstimate> {
        let working = &self.options.working;
        let gmm = &self.options.gmm;
        match method {
            Method::True => {
                let point = iptw(self.sample, self.pi_true)?;
                self.finish(point, var_true(self.sample, self.pi_true)?, 0)
            }
            Method::Glm => {
                let (model, pi, point) = self.glm()?;
                let v = var_glm(self.sample, &model)?;
                let clips = pi.iter().filter(|&&p| p < PI_CLIP || p > 1.0 - PI_CLIP).count();
                self.finish(point, v, clips)
            }
            Method::Cbps => {
                let system = MomentSystem::cbps(self.sample, &working.f, &working.map, Link::Logit)?;
                let fit = system.solve(gmm)?;
                let pi = system.propensities(&fit.beta_hat)?.pi;
                let point = iptw(self.sample, &pi)?;
                let v = var_cbps(self.sample, &system, &fit.beta_hat, &OutcomePlugIn::empirical(self.sample, &pi)?)?;
                self.finish(point, v, fit.clip_events)
            }
            Method::Ocbps => {
                let system = MomentSystem::ocbps(self.sample, &working.balance, &working.map, Link::Logit)?;
                let fit = system.solve(gmm)?;
                let pi = system.propensities(&fit.beta_hat)?.pi;
                let point = iptw(self.sample, &pi)?;
                let v = var_ocbps(self.sample, &system, &fit.beta_hat, &self.fits()?, OcbpsForm::Sandwich)?;
                self.finish(point, v, fit.clip_events)
            }
            Method::Aipw => {
                let (_, pi, _) = self.glm()?;
                let fits = self.fits()?;
                let point = aipw(self.sample, &pi, &fits, &working.balance)?;
                let v = var_aipw(self.sample, &pi, &fits, &working.balance, point)?;
                self.finish(point, v, 0)
            }
            Method::OcbpsSieve => {
                let fit = fit_ocbps_sieve(self.sample, &working.sieve, None, Link::Logit, gmm)?;
                let fits = fit_outcomes(self.sample, &working.sieve)?;
                let plug = OutcomePlugIn::from_fits(self.sample, &fits, &working.sieve)?;
                let v = var_vopt_plugin(self.sample, &fit.pi, &plug, fit.estimate)?;
                self.finish(fit.estimate, v, fit.fit.clip_events)
            }
        }
    }
}

/// Draws replication `r` and runs every estimator in `methods` on it.
pub fn run_replication(spec: &DgpSpec, methods: &[Method], r: u64, base_seed: u64, options: &McOptions) -> Replication {
    let draw = match spec.draw_with_rng(&mut replication_rng(base_seed, r)) {
        Ok(draw) => draw,
        Err(e) => {
            let estimates = methods.iter().map(|&m| (m, Err(e.clone()))).collect();
            return Replication { draw: None, estimates };
        }
    };
    let mut ctx = Context { sample: &draw.sample, pi_true: &draw.pi_true, options, fits: None, glm: None };
    let estimates = methods.iter().map(|&m| (m, ctx.estimate(m))).collect();
    Replication { draw: Some(draw), estimates }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub method: Method,
    pub bias: f64,
    /// Standard deviation with divisor equal to the number of successes.
    pub sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub successes: usize,
    pub failures: usize,
    pub mean_clip_events: f64,
    /// Mean estimated asymptotic variance of `sqrt(n) (point - truth)`.
    pub mean_variance: f64,
    pub floored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub scenario: DgpSpec,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub true_ate: f64,
    pub mean_cap_events: f64,
    pub rows: Vec<EstimatorSummary>,
    /// Set when some estimator failed in more than 5% of replications.
    pub invalid: bool,
}

impl McSummary {
    pub fn row(&self, method: Method) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned text table, one block per statistic.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let s = &self.scenario;
        let _ = writeln!(
            out,
            "scenario {}  n={}  beta1={}  reps={}  seed={}  true ATE={}",
            s.scenario,
            s.n,
            format_sig(s.beta1),
            self.reps,
            self.seed,
            format_sig(self.true_ate)
        );
        let blocks: [(&str, fn(&EstimatorSummary) -> String); 5] = [
            ("Bias", |r| format!("{:.2}", r.bias)),
            ("Std Dev", |r| format!("{:.2}", r.sd)),
            ("RMSE", |r| format!("{:.2}", r.rmse)),
            ("Coverage", |r| format!("{:.3}", r.coverage)),
            ("Failures", |r| r.failures.to_string()),
        ];
        for (name, value) in blocks {
            for (k, row) in self.rows.iter().enumerate() {
                let label = if k == 0 { name } else { "" };
                let _ = writeln!(out, "{label:<10} {:<12} {:>10}", row.method.label(), value(row));
            }
        }
        if self.invalid {
            let _ = writeln!(out, "INVALID: failures exceed {:.0}% of replications", MAX_FAILURE_SHARE * 100.0);
        }
        out
    }
}

/// `%g`-style rendering with 6 significant digits.
pub fn format_sig(x: f64) -> String {
    const DIGITS: i32 = 6;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= DIGITS {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{:.*}", (DIGITS - 1 - exp) as usize, x))
    }
}

fn summarise(method: Method, truth: f64, level_hits: &[(RepEstimate, bool)], failures: usize) -> EstimatorSummary {
    let s = level_hits.len();
    if s == 0 {
        return EstimatorSummary {
            method,
            bias: f64::NAN,
            sd: f64::NAN,
            rmse: f64::NAN,
            coverage: f64::NAN,
            successes: 0,
            failures,
            mean_clip_events: f64::NAN,
            mean_variance: f64::NAN,
            floored: 0,
        };
    }
    let n = s as f64;
    let mean = level_hits.iter().map(|(e, _)| e.point).sum::<f64>() / n;
    let sd = (level_hits.iter().map(|(e, _)| (e.point - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmse = (level_hits.iter().map(|(e, _)| (e.point - truth).powi(2)).sum::<f64>() / n).sqrt();
    EstimatorSummary {
        method,
        bias: mean - truth,
        sd,
        rmse,
        coverage: level_hits.iter().filter(|(_, c)| *c).count() as f64 / n,
        successes: s,
        failures,
        mean_clip_events: level_hits.iter().map(|(e, _)| e.clip_events as f64).sum::<f64>() / n,
        mean_variance: level_hits.iter().map(|(e, _)| e.variance).sum::<f64>() / n,
        floored: level_hits.iter().filter(|(e, _)| e.floored).count(),
    }
}

pub fn run_monte_carlo(spec: &DgpSpec, methods: &[Method], reps: usize, base_seed: u64) -> Result<McSummary> {
    run_monte_carlo_with(spec, methods, reps, base_seed, &McOptions::default())
}

/// Runs `reps` replications in parallel; statistics are reduced in
/// replication order, so the result does not depend on the schedule.
pub fn run_monte_carlo_with(
    spec: &DgpSpec,
    methods: &[Method],
    reps: usize,
    base_seed: u64,
    options: &McOptions,
) -> Result<McSummary> {
    spec.validate()?;
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    let truth = spec.true_ate();
    let results: Vec<(usize, Vec<Option<RepEstimate>>)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let rep = run_replication(spec, methods, r, base_seed, options);
            let caps = rep.draw.as_ref().map_or(0, |d| d.cap_events);
            let estimates = rep
                .estimates
                .into_iter()
                .map(|(m, e)| match e {
                    Ok(e) => Some(e),
                    Err(err) => {
                        log::debug!("replication {r}, {m}: {err}");
                        None
                    }
                })
                .collect();
            (caps, estimates)
        })
        .collect();

    let mut rows = Vec::with_capacity(methods.len());
    for (k, &method) in methods.iter().enumerate() {
        let ok: Vec<(RepEstimate, bool)> = results
            .iter()
            .filter_map(|(_, e)| e[k])
            .map(|e| (e, e.ci.0 <= truth && truth <= e.ci.1))
            .collect();
        let failures = reps - ok.len();
        rows.push(summarise(method, truth, &ok, failures));
    }
    let invalid = rows.iter().any(|r| r.failures as f64 > MAX_FAILURE_SHARE * reps as f64);
    let mean_cap_events = results.iter().map(|(c, _)| *c as f64).sum::<f64>() / reps as f64;
    Ok(McSummary {
        scenario: spec.clone(),
        reps,
        seed: base_seed,
        level: options.level,
        true_ate: truth,
        mean_cap_events,
        rows,
        invalid,
    })
}

/// Sample mean of `values` and its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let v = DVector::from_column_slice(values);
    let mean = v.mean();
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::dgp::Scenario;

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(82.2), "82.2");
        assert_eq!(format_sig(-32.96), "-32.96");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig(123456789.0), "1.23457e+08");
        assert_eq!(format_sig(0.0000123456), "1.23456e-05");
        assert_eq!(format_sig(0.956), "0.956");
        assert_eq!(format_sig(1000000.0), "1e+06");
        assert_eq!(format_sig(999999.4), "999999");
    }

    #[test]
    fn single_replication_has_zero_sd() {
        let spec = DgpSpec::new(Scenario::BothCorrect, 200, 0.0);
        let s = run_monte_carlo(&spec, &[Method::True, Method::Ocbps], 1, 4).unwrap();
        for row in &s.rows {
            assert_eq!(row.sd, 0.0);
            assert_eq!(row.rmse, row.bias.abs());
        }
    }

    #[test]
    fn rejects_empty_requests() {
        let spec = DgpSpec::new(Scenario::BothCorrect, 200, 0.0);
        assert!(run_monte_carlo(&spec, &[], 3, 1).is_err());
        assert!(run_monte_carlo(&spec, &[Method::Glm], 0, 1).is_err());
    }
}
