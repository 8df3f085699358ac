//! Plug-in asymptotic variances of `sqrt(n) (mu_hat - mu)` and normal
//! confidence intervals.
//!
//! Every estimator replaces the population propensity, `K` and `L` by their
//! fitted values and expectations by sample averages.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{BalanceSpec, ObservedSample};
use crate::error::{Error, Result};
use crate::estimators::{iptw, EstimandKind, OutcomeFits};
use crate::gmm::{ridged, ridged_inverse, MomentKind, MomentSystem};
use crate::propensity::PropensityModel;

/// A variance after flooring negative plug-ins at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub floored: bool,
}

impl VarianceEstimate {
    fn floor(raw: f64, what: &str) -> Result<Self> {
        if !raw.is_finite() {
            return Err(Error::Evaluation(format!("{what} variance is not finite")));
        }
        if raw < 0.0 {
            log::warn!("{what} variance plug-in is negative ({raw:.3e}); flooring at 0");
            return Ok(Self { value: 0.0, floored: true });
        }
        Ok(Self { value: raw, floored: false })
    }
}

/// Per-unit outcome plug-ins `K_i`, `L_i` and the arm residual variances.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePlugIn {
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
}

impl OutcomePlugIn {
    pub fn from_fits(sample: &ObservedSample, fits: &OutcomeFits, spec: &BalanceSpec) -> Result<Self> {
        let (k, l) = fits.predict(sample, spec)?;
        Ok(Self { k, l, sigma0_sq: fits.sigma0_sq, sigma1_sq: fits.sigma1_sq })
    }

    /// Unit-level stand-ins built from the observed outcomes: `K_i` is set so
    /// that `(K_i + (1 - pi_i) L_i) / (pi_i (1 - pi_i))` equals the realised
    /// `T Y / pi^2 + (1 - T) Y / (1 - pi)^2`, with `L_i = 0`.
    pub fn empirical(sample: &ObservedSample, pi: &[f64]) -> Result<Self> {
        check_pi(sample, pi)?;
        let k = (0..sample.n())
            .map(|i| {
                let (t, y, p) = (sample.treatment()[i], sample.outcome()[i], pi[i]);
                t * y * (1.0 - p) / p + (1.0 - t) * y * p / (1.0 - p)
            })
            .collect();
        Ok(Self { k, l: vec![0.0; sample.n()], sigma0_sq: 0.0, sigma1_sq: 0.0 })
    }

    pub fn zeros(n: usize) -> Self {
        Self { k: vec![0.0; n], l: vec![0.0; n], sigma0_sq: 0.0, sigma1_sq: 0.0 }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.k.len() != n || self.l.len() != n {
            return Err(Error::Dimension(format!(
                "outcome plug-ins have {} / {} entries for {n} units",
                self.k.len(),
                self.l.len()
            )));
        }
        Ok(())
    }

    /// `K_i + (1 - pi_i) L_i`.
    fn combined(&self, i: usize, p: f64) -> f64 {
        self.k[i] + (1.0 - p) * self.l[i]
    }
}

fn check_pi(sample: &ObservedSample, pi: &[f64]) -> Result<()> {
    if pi.len() != sample.n() {
        return Err(Error::Dimension(format!("{} probabilities for {} units", pi.len(), sample.n())));
    }
    if pi.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Evaluation("probabilities must lie in (0,1)".into()));
    }
    Ok(())
}

/// `(1/n) sum [T Y^2/pi^2 + (1-T) Y^2/(1-pi)^2] - mu_hat^2`, unfloored.
fn sigma_mu(sample: &ObservedSample, pi: &[f64]) -> Result<f64> {
    let mu = iptw(sample, pi)?;
    let n = sample.n() as f64;
    let second: f64 = (0..sample.n())
        .map(|i| {
            let (t, y, p) = (sample.treatment()[i], sample.outcome()[i], pi[i]);
            t * y * y / (p * p) + (1.0 - t) * y * y / ((1.0 - p) * (1.0 - p))
        })
        .sum::<f64>()
        / n;
    Ok(second - mu * mu)
}

/// Variance of the IPTW estimator with known probabilities.
pub fn var_true(sample: &ObservedSample, pi: &[f64]) -> Result<VarianceEstimate> {
    check_pi(sample, pi)?;
    VarianceEstimate::floor(sigma_mu(sample, pi)?, "IPTW")
}

fn symmetric_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularDesign(format!("{what} is not positive definite")))
}

/// IPTW with a maximum-likelihood propensity: `Sigma_mu - H_y' I^{-1} H_y`,
/// with `H_y = -Cov(mu_i, s_i)` and `I = E[s s']` taken empirically from the
/// scores `s_i`. The result is the residual variance of the IPTW summand
/// regressed on the scores, so it lies in `[0, Sigma_mu]`.
pub fn var_glm<M: PropensityModel>(sample: &ObservedSample, model: &M) -> Result<VarianceEstimate> {
    let pi = model.fitted(sample)?;
    check_pi(sample, &pi)?;
    let q = model.coefficients().len();
    let n = sample.n() as f64;
    let mu = iptw(sample, &pi)?;
    let mut h_y = DVector::zeros(q);
    let mut info = DMatrix::zeros(q, q);
    for (i, &p) in pi.iter().enumerate() {
        let (t, y) = (sample.treatment()[i], sample.outcome()[i]);
        let grad = DVector::from_vec(model.pi_grad(sample.row(i))?);
        let score = grad * ((t - p) / (p * (1.0 - p)));
        h_y -= &score * (t * y / p - (1.0 - t) * y / (1.0 - p) - mu);
        info += &score * score.transpose();
    }
    h_y /= n;
    info /= n;
    let info_inv = symmetric_inverse(&info, "score information")?;
    let reduction = (h_y.transpose() * info_inv * &h_y)[(0, 0)];
    VarianceEstimate::floor(sigma_mu(sample, &pi)? - reduction, "GLM")
}

/// Plug-in blocks of the joint asymptotic covariance of `(mu_hat, beta_hat)`
/// at `W = Omega^{-1}`.
#[derive(Debug, Clone)]
pub struct VarianceComponents {
    pub sigma_mu: f64,
    /// Derivative of the IPTW summand with respect to `beta` (length q).
    pub h_y: DVector<f64>,
    /// Jacobian of the mean moment vector (m x q).
    pub h_f: DMatrix<f64>,
    /// Second moment of the unit moments (m x m).
    pub omega: DMatrix<f64>,
    /// `Cov(mu_i, g_i)` (length m).
    pub cov_mu_g: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub sigma_mu_beta: DVector<f64>,
}

impl VarianceComponents {
    /// `Sigma_mu + 2 H_y' Sigma_mu_beta + H_y' Sigma_beta H_y`.
    pub fn sandwich(&self) -> f64 {
        self.sigma_mu + 2.0 * self.h_y.dot(&self.sigma_mu_beta) + (self.h_y.transpose() * &self.sigma_beta * &self.h_y)[(0, 0)]
    }
}

/// Components for a balancing fit of kind CBPS or oCBPS at `beta`.
pub fn variance_components(
    sample: &ObservedSample,
    system: &MomentSystem<'_>,
    beta: &DVector<f64>,
    plug: &OutcomePlugIn,
) -> Result<VarianceComponents> {
    if system.n() != sample.n() {
        return Err(Error::Dimension(format!("moment system has {} units, sample {}", system.n(), sample.n())));
    }
    plug.check(sample.n())?;
    if system.kind() == MomentKind::Att {
        return Err(Error::Config("ATE variance components need an ATE moment system".into()));
    }
    let props = system.propensities(beta)?;
    let pi = &props.pi;
    let (n, q) = (sample.n() as f64, system.q());
    let sigma_mu = sigma_mu(sample, pi)?;
    let mu = iptw(sample, pi)?;

    let mut h_y = DVector::zeros(q);
    for (i, &p) in pi.iter().enumerate() {
        let scale = plug.combined(i, p) * props.slope[i] / (p * (1.0 - p));
        for j in 0..q {
            h_y[j] -= scale * system.basis()[(i, j)];
        }
    }
    h_y /= n;

    // empirical, like Sigma_mu and Omega: the sandwich is then the mean square
    // of one influence function and cannot go negative
    let g = system.unit_moments(beta)?;
    let centred = DVector::from_fn(sample.n(), |i, _| {
        let (t, y, p) = (sample.treatment()[i], sample.outcome()[i], pi[i]);
        t * y / p - (1.0 - t) * y / (1.0 - p) - mu
    });
    let cov_mu_g = g.transpose() * centred / n;

    let h_f = system.eval_jacobian(beta)?;
    let omega = system.estimate_omega(beta)?;
    let weight = ridged_inverse(&omega)?;
    let sigma_beta = symmetric_inverse(&(h_f.transpose() * &weight * &h_f), "H_f' W H_f")?;
    let sigma_mu_beta = -(&sigma_beta * h_f.transpose() * &weight * &cov_mu_g);
    Ok(VarianceComponents { sigma_mu, h_y, h_f, omega, cov_mu_g, sigma_beta, sigma_mu_beta })
}

/// CBPS-weighted IPTW variance.
pub fn var_cbps(
    sample: &ObservedSample,
    system: &MomentSystem<'_>,
    beta: &DVector<f64>,
    plug: &OutcomePlugIn,
) -> Result<VarianceEstimate> {
    let c = variance_components(sample, system, beta, plug)?;
    VarianceEstimate::floor(c.sandwich(), "CBPS")
}

/// Algebraic form of the oCBPS variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OcbpsForm {
    /// The GMM sandwich of [`variance_components`]; stays valid when either
    /// working model is wrong.
    #[default]
    Sandwich,
    /// `Sigma_mu - v' G (G' Omega^{-1} G)^{-1} G' v`, valid for `m >= q`
    /// when both working models are right.
    General,
    /// `Sigma_mu - v' Omega v`, the square case `m = q`.
    Square,
}

/// oCBPS variance; the closed forms take `v = (alpha1; alpha2)` from the outcome fits.
pub fn var_ocbps(
    sample: &ObservedSample,
    system: &MomentSystem<'_>,
    beta: &DVector<f64>,
    fits: &OutcomeFits,
    form: OcbpsForm,
) -> Result<VarianceEstimate> {
    let MomentKind::Ocbps { m1 } = system.kind() else {
        return Err(Error::Config("oCBPS variance needs an oCBPS moment system".into()));
    };
    if fits.alpha1.len() != m1 || fits.alpha1.len() + fits.alpha2.len() != system.m() {
        return Err(Error::Dimension(format!(
            "outcome coefficients ({}, {}) do not match moment blocks ({m1}, {})",
            fits.alpha1.len(),
            fits.alpha2.len(),
            system.m() - m1
        )));
    }
    let pi = system.propensities(beta)?.pi;
    let v = fits.stacked();
    let value = match form {
        OcbpsForm::Sandwich => {
            let plug = OutcomePlugIn::empirical(sample, &pi)?;
            variance_components(sample, system, beta, &plug)?.sandwich()
        }
        OcbpsForm::General => {
            let omega = system.estimate_omega(beta)?;
            let g = system.eval_jacobian(beta)?;
            let inner = symmetric_inverse(&(g.transpose() * ridged_inverse(&omega)? * &g), "G' W G")?;
            let gv = g.transpose() * &v;
            sigma_mu(sample, &pi)? - (gv.transpose() * inner * gv)[(0, 0)]
        }
        OcbpsForm::Square => {
            if !system.is_just_identified() {
                return Err(Error::Config(format!("square form needs m = q (m = {}, q = {})", system.m(), system.q())));
            }
            let omega = system.estimate_omega(beta)?;
            sigma_mu(sample, &pi)? - (v.transpose() * ridged(&omega) * &v)[(0, 0)]
        }
    };
    VarianceEstimate::floor(value, "oCBPS")
}

/// Efficiency-bound plug-in `(1/n) sum [s1/pi + s0/(1-pi) + (L_i - mu)^2]`.
pub fn var_vopt_plugin(sample: &ObservedSample, pi: &[f64], plug: &OutcomePlugIn, mu: f64) -> Result<VarianceEstimate> {
    check_pi(sample, pi)?;
    plug.check(sample.n())?;
    let total: f64 = pi
        .iter()
        .zip(&plug.l)
        .map(|(&p, &l)| plug.sigma1_sq / p + plug.sigma0_sq / (1.0 - p) + (l - mu).powi(2))
        .sum();
    VarianceEstimate::floor(total / sample.n() as f64, "efficiency bound")
}

/// ATT variance `p^{-2} (1/n) sum [pi s1 + pi^2/(1-pi) s0 + pi (L - tau)^2]`.
pub fn var_att(sample: &ObservedSample, pi: &[f64], plug: &OutcomePlugIn, tau: f64) -> Result<VarianceEstimate> {
    check_pi(sample, pi)?;
    plug.check(sample.n())?;
    let n = sample.n() as f64;
    let p_treated = sample.n_treated() as f64 / n;
    if p_treated <= 0.0 {
        return Err(Error::Degenerate("no treated units".into()));
    }
    let total: f64 = pi
        .iter()
        .zip(&plug.l)
        .map(|(&p, &l)| p * plug.sigma1_sq + p * p / (1.0 - p) * plug.sigma0_sq + p * (l - tau).powi(2))
        .sum();
    VarianceEstimate::floor(total / n / (p_treated * p_treated), "ATT")
}

/// Empirical variance of the AIPW influence function.
pub fn var_aipw(
    sample: &ObservedSample,
    pi: &[f64],
    fits: &OutcomeFits,
    spec: &BalanceSpec,
    mu: f64,
) -> Result<VarianceEstimate> {
    check_pi(sample, pi)?;
    let (k, l) = fits.predict(sample, spec)?;
    let total: f64 = (0..sample.n())
        .map(|i| {
            let (t, y, p) = (sample.treatment()[i], sample.outcome()[i], pi[i]);
            let psi = t * y / p - (1.0 - t) * y / (1.0 - p) - (t - p) * ((k[i] + l[i]) / p + k[i] / (1.0 - p));
            (psi - mu).powi(2)
        })
        .sum();
    VarianceEstimate::floor(total / sample.n() as f64, "AIPW")
}

/// Two-sided standard-normal quantile `z` with `P(|Z| <= z) = level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} must lie in (0,1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// `point -/+ z * sqrt(variance / n)`.
pub fn confidence_interval(point: f64, variance: f64, n: usize, level: f64) -> Result<(f64, f64)> {
    if !(variance >= 0.0) || n == 0 {
        return Err(Error::Config(format!("need variance >= 0 and n >= 1 (got {variance}, {n})")));
    }
    let half = normal_quantile(level)? * (variance / n as f64).sqrt();
    Ok((point - half, point + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    True,
    Glm,
    Cbps,
    Ocbps,
    OcbpsSieve,
    Aipw,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::True, Method::Glm, Method::Cbps, Method::Ocbps, Method::OcbpsSieve, Method::Aipw];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::True => "true",
            Method::Glm => "glm",
            Method::Cbps => "cbps",
            Method::Ocbps => "ocbps",
            Method::OcbpsSieve => "ocbps-sieve",
            Method::Aipw => "aipw",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::True => "True",
            Method::Glm => "GLM",
            Method::Cbps => "CBPS",
            Method::Ocbps => "oCBPS",
            Method::OcbpsSieve => "oCBPS-sieve",
            Method::Aipw => "AIPW",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key || m.label().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of true, glm, cbps, ocbps, ocbps-sieve, aipw)")))
    }
}

/// Fit diagnostics carried alongside a point estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostics {
    pub moment_residuals: Vec<f64>,
    pub max_residual: f64,
    pub clip_events: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: EstimandKind,
    pub method: Method,
    pub n: usize,
    pub point: f64,
    /// Asymptotic variance of `sqrt(n) (point - truth)`.
    pub variance: f64,
    pub variance_floored: bool,
    pub std_error: f64,
    pub level: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub diagnostics: BalanceDiagnostics,
}

impl EstimateReport {
    pub fn new(
        estimand: EstimandKind,
        method: Method,
        n: usize,
        point: f64,
        variance: VarianceEstimate,
        level: f64,
        diagnostics: BalanceDiagnostics,
    ) -> Result<Self> {
        let (ci_low, ci_high) = confidence_interval(point, variance.value, n, level)?;
        Ok(Self {
            estimand,
            method,
            n,
            point,
            variance: variance.value,
            variance_floored: variance.floored,
            std_error: (variance.value / n as f64).sqrt(),
            level,
            ci_low,
            ci_high,
            diagnostics,
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}
