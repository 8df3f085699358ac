//! The five simulation designs plus a composable custom design.
//!
//! Covariates are `X1 ~ N(3, 2)` and `X2, X3, X4 ~ N(0, 1)`, independent.
//! Potential outcomes share one `N(0, 1)` error: `Y(0) = K(X) + e` and
//! `Y(1) = K(X) + L(X) + e`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{CovariateFunction, ObservedSample};
use crate::error::{Error, Result};
use crate::propensity::expit;

pub const DIM: usize = 4;
pub const X1_MEAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    BothCorrect,
    PsMisspecified,
    PsLocal,
    OutcomeMisspecified,
    BothMisspecified,
    Custom,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::BothCorrect,
        Scenario::PsMisspecified,
        Scenario::PsLocal,
        Scenario::OutcomeMisspecified,
        Scenario::BothMisspecified,
        Scenario::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::BothCorrect => "both-correct",
            Scenario::PsMisspecified => "ps-misspecified",
            Scenario::PsLocal => "ps-local",
            Scenario::OutcomeMisspecified => "outcome-misspecified",
            Scenario::BothMisspecified => "both-misspecified",
            Scenario::Custom => "custom",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// True propensity family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityForm {
    /// Logistic in `(x1, .., x4)` without intercept.
    Correct,
    /// The same logistic applied to nonlinear transforms of the covariates.
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeForm {
    Linear,
    Quadratic,
}

/// How the second parameter of `N(3, 2)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum X1Spread {
    /// Variance 2.
    #[default]
    Variance,
    /// Standard deviation 2.
    Sd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Coefficient of `x1` (entering with a minus sign) in the propensity.
    pub beta1: f64,
    /// Exponential-tilt magnitude; defaults to `n^{-1/2}` for `ps-local`, 0 otherwise.
    pub xi: Option<f64>,
    pub u_direction: CovariateFunction,
    /// Outcome misspecification magnitude (custom scenario).
    pub delta: f64,
    pub r1: Vec<CovariateFunction>,
    pub r2: Vec<CovariateFunction>,
    /// Cap on tilted propensities.
    pub truncation: f64,
    pub x1_spread: X1Spread,
    /// Overrides for the custom scenario.
    pub propensity: Option<PropensityForm>,
    pub outcome: Option<OutcomeForm>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::BothCorrect,
            n: 1000,
            beta1: 0.0,
            xi: None,
            u_direction: CovariateFunction::Square(1),
            delta: 0.0,
            r1: Vec::new(),
            r2: Vec::new(),
            truncation: 0.95,
            x1_spread: X1Spread::Variance,
            propensity: None,
            outcome: None,
        }
    }
}

/// Draw of one replication together with its generating probabilities.
#[derive(Debug, Clone)]
pub struct Draw {
    pub sample: ObservedSample,
    pub pi_true: Vec<f64>,
    /// Units whose tilted propensity hit the cap.
    pub cap_events: usize,
}

/// `E[X^k]` for `X ~ N(mean, var)`.
pub fn normal_raw_moment(k: u32, mean: f64, var: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, mean);
    if k == 0 {
        return 1.0;
    }
    for j in 2..=k {
        let next = mean * cur + f64::from(j - 1) * var * prev;
        prev = cur;
        cur = next;
    }
    cur
}

impl DgpSpec {
    pub fn new(scenario: Scenario, n: usize, beta1: f64) -> Self {
        Self { scenario, n, beta1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("n = {} is below the minimum of 10", self.n)));
        }
        if !self.beta1.is_finite() || !self.delta.is_finite() {
            return Err(Error::Config("beta1 and delta must be finite".into()));
        }
        if let Some(xi) = self.xi {
            if !(xi >= 0.0 && xi.is_finite()) {
                return Err(Error::Config(format!("xi = {xi} must be finite and non-negative")));
            }
            if xi > 0.0 && !matches!(self.scenario, Scenario::PsLocal | Scenario::Custom) {
                return Err(Error::Config(format!("xi applies only to ps-local and custom, not {}", self.scenario)));
            }
        }
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            return Err(Error::Config(format!("truncation {} must lie in (0,1)", self.truncation)));
        }
        let custom = self.scenario == Scenario::Custom;
        if !custom && (self.propensity.is_some() || self.outcome.is_some()) {
            return Err(Error::Config("propensity/outcome overrides need scenario = custom".into()));
        }
        if !custom && (self.delta != 0.0 || !self.r1.is_empty() || !self.r2.is_empty()) {
            return Err(Error::Config("delta, r1 and r2 need scenario = custom".into()));
        }
        for f in std::iter::once(&self.u_direction).chain(&self.r1).chain(&self.r2) {
            f.check_dimension(DIM)?;
        }
        Ok(())
    }

    pub fn propensity_form(&self) -> PropensityForm {
        match self.scenario {
            Scenario::PsMisspecified | Scenario::BothMisspecified => PropensityForm::Transformed,
            Scenario::Custom => self.propensity.unwrap_or(PropensityForm::Correct),
            _ => PropensityForm::Correct,
        }
    }

    pub fn outcome_form(&self) -> OutcomeForm {
        match self.scenario {
            Scenario::OutcomeMisspecified | Scenario::BothMisspecified => OutcomeForm::Quadratic,
            Scenario::Custom => self.outcome.unwrap_or(OutcomeForm::Linear),
            _ => OutcomeForm::Linear,
        }
    }

    /// Effective tilt magnitude.
    pub fn tilt(&self) -> f64 {
        match self.scenario {
            Scenario::PsLocal => self.xi.unwrap_or(1.0 / (self.n as f64).sqrt()),
            Scenario::Custom => self.xi.unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn x1_variance(&self) -> f64 {
        match self.x1_spread {
            X1Spread::Variance => 2.0,
            X1Spread::Sd => 4.0,
        }
    }

    /// Coefficients `(0, -beta1, 0.5, -0.25, -0.1)` of the untilted logistic
    /// over `(1, x1, .., x4)`.
    pub fn working_coefficients(&self) -> Vec<f64> {
        vec![0.0, -self.beta1, 0.5, -0.25, -0.1]
    }

    /// Linear index of the untilted true propensity.
    pub fn propensity_index(&self, x: &[f64]) -> f64 {
        let z = match self.propensity_form() {
            PropensityForm::Correct => [x[0], x[1], x[2], x[3]],
            PropensityForm::Transformed => [
                (x[0] / 3.0).exp(),
                x[1] / (1.0 + x[0].exp()) + 10.0,
                x[0] * x[2] / 25.0 + 0.6,
                x[0] + x[3] + 20.0,
            ],
        };
        -self.beta1 * z[0] + 0.5 * z[1] - 0.25 * z[2] - 0.1 * z[3]
    }

    /// Untilted propensity `pi_{beta*}(x)`.
    pub fn base_propensity(&self, x: &[f64]) -> f64 {
        expit(self.propensity_index(x))
    }

    /// Generating propensity and whether the cap was applied.
    pub fn true_propensity(&self, x: &[f64]) -> (f64, bool) {
        let base = self.base_propensity(x);
        let xi = self.tilt();
        if xi == 0.0 {
            return (base, false);
        }
        let tilted = base * (xi * self.u_direction.eval_unchecked(x)).exp();
        if tilted > self.truncation {
            (self.truncation, true)
        } else {
            (tilted, false)
        }
    }

    /// `K` and `L` as weighted sums of covariate functions.
    pub fn outcome_terms(&self) -> (Vec<(f64, CovariateFunction)>, Vec<(f64, CovariateFunction)>) {
        use CovariateFunction::{Constant, Coordinate, Square};
        let mut k = vec![(200.0, Constant)];
        let mut l = Vec::new();
        match self.outcome_form() {
            OutcomeForm::Linear => {
                k.extend((2..=DIM).map(|j| (13.7, Coordinate(j))));
                l.push((27.4, Coordinate(1)));
            }
            OutcomeForm::Quadratic => {
                k.extend((2..=DIM).map(|j| (13.7, Square(j))));
                l.push((27.4, Square(1)));
            }
        }
        k.extend(self.r1.iter().map(|f| (self.delta, f.clone())));
        l.extend(self.r2.iter().map(|f| (self.delta, f.clone())));
        (k, l)
    }

    /// `(K(x), L(x))`.
    pub fn outcome_means(&self, x: &[f64]) -> (f64, f64) {
        let (k, l) = self.outcome_terms();
        let eval = |terms: &[(f64, CovariateFunction)]| terms.iter().map(|(c, f)| c * f.eval_unchecked(x)).sum();
        (eval(&k), eval(&l))
    }

    /// `E[f(X)]` for a monomial under the covariate distribution.
    pub fn expectation(&self, f: &CovariateFunction) -> f64 {
        f.exponents(DIM)
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                if k == 0 {
                    normal_raw_moment(e, X1_MEAN, self.x1_variance())
                } else {
                    normal_raw_moment(e, 0.0, 1.0)
                }
            })
            .product()
    }

    /// Population ATE `E[L(X)]`, exact.
    pub fn true_ate(&self) -> f64 {
        self.outcome_terms().1.iter().map(|(c, f)| c * self.expectation(f)).sum()
    }

    /// One covariate vector.
    pub fn draw_covariates<R: Rng>(&self, rng: &mut R) -> [f64; DIM] {
        let sd1 = self.x1_variance().sqrt();
        let mut x = [0.0; DIM];
        for (k, v) in x.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = if k == 0 { X1_MEAN + sd1 * z } else { z };
        }
        x
    }

    pub fn draw_with_rng<R: Rng>(&self, rng: &mut R) -> Result<Draw> {
        self.validate()?;
        let mut covariates = Vec::with_capacity(self.n * DIM);
        let mut treatment = Vec::with_capacity(self.n);
        let mut outcome = Vec::with_capacity(self.n);
        let mut pi_true = Vec::with_capacity(self.n);
        let mut cap_events = 0;
        for _ in 0..self.n {
            let x = self.draw_covariates(rng);
            let eps: f64 = rng.sample(StandardNormal);
            let (p, capped) = self.true_propensity(&x);
            cap_events += usize::from(capped);
            let t = rng.random::<f64>() < p;
            let (k, l) = self.outcome_means(&x);
            covariates.extend_from_slice(&x);
            treatment.push(u8::from(t));
            outcome.push(if t { k + l + eps } else { k + eps });
            pi_true.push(p);
        }
        let sample = ObservedSample::from_row_major(covariates, DIM, treatment, outcome)?;
        Ok(Draw { sample, pi_true, cap_events })
    }
}

/// Generator for replication `r`: stream `r` of the ChaCha8 generator keyed
/// by `base_seed`, so any replication can be regenerated in isolation.
pub fn replication_rng(base_seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(r);
    rng
}

/// The sample of replication 0 for `seed`.
pub fn draw_replication(spec: &DgpSpec, seed: u64) -> Result<ObservedSample> {
    Ok(spec.draw_with_rng(&mut replication_rng(seed, 0))?.sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_moments() {
        assert_eq!(normal_raw_moment(0, 3.0, 2.0), 1.0);
        assert_eq!(normal_raw_moment(1, 3.0, 2.0), 3.0);
        assert_eq!(normal_raw_moment(2, 3.0, 2.0), 11.0);
        assert_eq!(normal_raw_moment(3, 3.0, 2.0), 27.0 + 3.0 * 3.0 * 2.0);
        assert_eq!(normal_raw_moment(4, 0.0, 1.0), 3.0);
    }

    #[test]
    fn true_effects() {
        assert!((DgpSpec::new(Scenario::BothCorrect, 1000, 0.0).true_ate() - 82.2).abs() < 1e-12);
        assert!((DgpSpec::new(Scenario::OutcomeMisspecified, 1000, 0.0).true_ate() - 301.4).abs() < 1e-12);
        let mut sd = DgpSpec::new(Scenario::BothMisspecified, 1000, 0.0);
        sd.x1_spread = X1Spread::Sd;
        assert!((sd.true_ate() - 27.4 * 13.0).abs() < 1e-12);
    }

    #[test]
    fn propensity_at_origin_is_half() {
        let spec = DgpSpec::new(Scenario::BothCorrect, 1000, 0.0);
        assert_eq!(spec.base_propensity(&[3.0, 0.0, 0.0, 0.0]), 0.5);
        let (k, l) = spec.outcome_means(&[3.0, 0.0, 0.0, 0.0]);
        assert_eq!(k, 200.0);
        assert!((l - 82.2).abs() < 1e-12);
    }

    #[test]
    fn local_tilt_is_capped() {
        let mut spec = DgpSpec::new(Scenario::PsLocal, 100, 0.0);
        spec.xi = Some(1.0);
        let (p, capped) = spec.true_propensity(&[3.0, 0.0, 0.0, 0.0]);
        assert!(capped && p == 0.95);
        assert!((spec.tilt() - 1.0).abs() < 1e-15);
        spec.xi = None;
        assert!((spec.tilt() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(DgpSpec::new(Scenario::BothCorrect, 5, 0.0).validate().is_err());
        let mut s = DgpSpec::new(Scenario::BothCorrect, 100, 0.0);
        s.outcome = Some(OutcomeForm::Quadratic);
        assert!(s.validate().is_err());
        s.scenario = Scenario::Custom;
        assert!(s.validate().is_ok());
        assert_eq!(s.outcome_form(), OutcomeForm::Quadratic);
        s.truncation = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn draws_are_reproducible() {
        let spec = DgpSpec::new(Scenario::PsLocal, 50, 0.5);
        let a = draw_replication(&spec, 9).unwrap();
        let b = draw_replication(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = spec.draw_with_rng(&mut replication_rng(9, 1)).unwrap().sample;
        assert_ne!(a, c);
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut spec = DgpSpec::new(Scenario::Custom, 300, 0.33);
        spec.r2 = vec![CovariateFunction::interaction(1, 2)];
        spec.delta = 0.5;
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"x1*x2\""));
        assert_eq!(serde_json::from_str::<DgpSpec>(&text).unwrap(), spec);
        let partial: DgpSpec = serde_json::from_str(r#"{"scenario":"ps-local","beta1":1}"#).unwrap();
        assert_eq!(partial.n, 1000);
    }
}
