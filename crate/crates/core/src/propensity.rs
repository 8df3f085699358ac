//! Parametric and sieve propensity models, plus the maximum-likelihood comparator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::design::{design_matrix, CovariateFunction, ObservedSample};
use crate::error::{Error, Result};

/// Probabilities used as inverse weights during iterative fits are clipped to
/// `[PI_CLIP, 1 - PI_CLIP]`.
pub const PI_CLIP: f64 = 1e-6;

const PI_FLOOR: f64 = f64::MIN_POSITIVE;
const PI_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Monotone link from the linear index to a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Link {
    #[default]
    Logit,
    /// Standard normal distribution function.
    Probit,
}

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Link {
    /// Link value, kept strictly inside (0, 1).
    pub fn prob(self, z: f64) -> f64 {
        let p = match self {
            Link::Logit => expit(z),
            Link::Probit => 0.5 * erfc(-z / std::f64::consts::SQRT_2),
        };
        p.clamp(PI_FLOOR, PI_CEIL)
    }

    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Link::Logit => {
                let p = expit(z);
                p * (1.0 - p)
            }
            Link::Probit => (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// Probability and its derivative with respect to the index, clipped for
    /// use as an inverse weight. A clipped probability has zero derivative.
    pub fn clipped(self, z: f64) -> (f64, f64, bool) {
        let p = self.prob(z);
        if p < PI_CLIP {
            (PI_CLIP, 0.0, true)
        } else if p > 1.0 - PI_CLIP {
            (1.0 - PI_CLIP, 0.0, true)
        } else {
            (p, self.deriv(z), false)
        }
    }
}

/// Shared behaviour of index models `pi(x) = J(beta' b(x))`.
pub trait PropensityModel {
    fn link(&self) -> Link;
    fn covariate_map(&self) -> &[CovariateFunction];
    fn coefficients(&self) -> &[f64];

    fn index(&self, x: &[f64]) -> Result<f64> {
        let map = self.covariate_map();
        let beta = self.coefficients();
        if map.len() != beta.len() {
            return Err(Error::Model(format!(
                "{} coefficients for {} basis functions",
                beta.len(),
                map.len()
            )));
        }
        map.iter().zip(beta).try_fold(0.0, |acc, (f, b)| Ok(acc + b * f.eval(x)?))
    }

    fn pi(&self, x: &[f64]) -> Result<f64> {
        Ok(self.link().prob(self.index(x)?))
    }

    /// Gradient of `pi(x)` with respect to the coefficients.
    fn pi_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let slope = self.link().deriv(self.index(x)?);
        self.covariate_map().iter().map(|f| Ok(slope * f.eval(x)?)).collect()
    }

    /// Fitted probabilities for every unit of `sample`.
    fn fitted(&self, sample: &ObservedSample) -> Result<Vec<f64>> {
        (0..sample.n()).map(|i| self.pi(sample.row(i))).collect()
    }
}

fn check_coefficients(beta: &[f64], map: &[CovariateFunction]) -> Result<()> {
    if map.is_empty() {
        return Err(Error::Model("a propensity model needs at least one basis function".into()));
    }
    if beta.len() != map.len() {
        return Err(Error::Model(format!("{} coefficients for {} basis functions", beta.len(), map.len())));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Model("coefficients must be finite".into()));
    }
    Ok(())
}

/// `pi(x) = expit(beta' map(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    coefficients: Vec<f64>,
    covariate_map: Vec<CovariateFunction>,
}

impl LogisticModel {
    pub fn new(coefficients: Vec<f64>, covariate_map: Vec<CovariateFunction>) -> Result<Self> {
        check_coefficients(&coefficients, &covariate_map)?;
        Ok(Self { coefficients, covariate_map })
    }
}

impl PropensityModel for LogisticModel {
    fn link(&self) -> Link {
        Link::Logit
    }
    fn covariate_map(&self) -> &[CovariateFunction] {
        &self.covariate_map
    }
    fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

/// `pi(x) = J(beta' B(x))` over a sieve basis of `kappa` functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveModel {
    link: Link,
    basis: Vec<CovariateFunction>,
    coefficients: Vec<f64>,
}

impl SieveModel {
    pub fn new(link: Link, basis: Vec<CovariateFunction>, coefficients: Vec<f64>) -> Result<Self> {
        check_coefficients(&coefficients, &basis)?;
        Ok(Self { link, basis, coefficients })
    }

    pub fn kappa(&self) -> usize {
        self.basis.len()
    }
}

impl PropensityModel for SieveModel {
    fn link(&self) -> Link {
        self.link
    }
    fn covariate_map(&self) -> &[CovariateFunction] {
        &self.basis
    }
    fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

const MLE_TOL: f64 = 1e-12;
const MLE_MAX_ITER: usize = 100;
/// Largest |index| accepted at an MLE solution; beyond it fitted
/// probabilities are numerically 0 or 1 and the data are (quasi-)separated.
const MLE_MAX_INDEX: f64 = 30.0;

fn log_likelihood(design: &DMatrix<f64>, t: &[f64], beta: &DVector<f64>) -> f64 {
    let z = design * beta;
    z.iter()
        .zip(t)
        .map(|(&z, &t)| {
            // log(1 + e^z) computed without overflow
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            t * z - softplus
        })
        .sum()
}

/// Newton iterations with step halving for the logistic log-likelihood.
/// Converges when the mean score has max-norm `<= 1e-12`, or when the Newton
/// step has shrunk to rounding level.
pub fn fit_logistic_design(design: &DMatrix<f64>, t: &[f64]) -> Result<DVector<f64>> {
    let q = design.ncols();
    let mut beta = DVector::zeros(q);
    let mut ll = log_likelihood(design, t, &beta);
    let fail = |iterations: usize, norm: f64, beta: &DVector<f64>| Error::NonConvergence {
        method: "logistic maximum likelihood".into(),
        iterations,
        criterion_norm: norm,
        best_beta: beta.iter().copied().collect(),
    };
    for iter in 0..=MLE_MAX_ITER {
        let z = design * &beta;
        let p: Vec<f64> = z.iter().map(|&z| expit(z)).collect();
        let resid = DVector::from_iterator(t.len(), t.iter().zip(&p).map(|(t, p)| t - p));
        let score = design.tr_mul(&resid);
        let norm = score.amax() / t.len() as f64;
        if !norm.is_finite() {
            return Err(fail(iter, norm, &beta));
        }
        if norm <= MLE_TOL {
            if z.amax() > MLE_MAX_INDEX {
                return Err(fail(iter, norm, &beta));
            }
            return Ok(beta);
        }
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= p[i] * (1.0 - p[i]);
        }
        let hessian = design.tr_mul(&weighted);
        let step = match hessian.cholesky() {
            Some(chol) => chol.solve(&score),
            None => return Err(fail(iter, norm, &beta)),
        };
        // rounding floor: the step no longer changes beta
        if step.amax() <= 4.0 * f64::EPSILON * (1.0 + beta.amax()) {
            if z.amax() > MLE_MAX_INDEX {
                return Err(fail(iter, norm, &beta));
            }
            return Ok(beta);
        }
        if iter == MLE_MAX_ITER {
            return Err(fail(iter, norm, &beta));
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &step * scale;
            let ll_trial = log_likelihood(design, t, &trial);
            if ll_trial.is_finite() && ll_trial >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = trial;
                ll = ll_trial;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || beta.amax() > 1e3 {
            return Err(fail(iter, norm, &beta));
        }
    }
    unreachable!("loop returns on its final iteration")
}

/// Maximum-likelihood logistic fit over `covariate_map`.
pub fn fit_mle(sample: &ObservedSample, covariate_map: &[CovariateFunction]) -> Result<LogisticModel> {
    let design = design_matrix(covariate_map, sample)?;
    let beta = fit_logistic_design(&design, sample.treatment())?;
    LogisticModel::new(beta.iter().copied().collect(), covariate_map.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::parse_function_spec;
    use CovariateFunction::*;

    fn logistic(beta: &[f64], map: &str) -> LogisticModel {
        LogisticModel::new(beta.to_vec(), parse_function_spec(map).unwrap()).unwrap()
    }

    #[test]
    fn pi_examples() {
        assert_eq!(logistic(&[0.0, 0.0], "1,x1").pi(&[5.0]).unwrap(), 0.5);
        assert!((logistic(&[3f64.ln()], "1").pi(&[0.0]).unwrap() - 0.75).abs() < 1e-15);
        let table = logistic(&[-1.0, 0.5, -0.25, -0.1], "x1,x2,x3,x4");
        assert_eq!(table.pi(&[0.0; 4]).unwrap(), 0.5);
    }

    #[test]
    fn pi_grad_examples() {
        let g = logistic(&[0.0, 0.0], "1,x1").pi_grad(&[2.0]).unwrap();
        assert_eq!(g, vec![0.25, 0.5]);
        let sieve = SieveModel::new(Link::Logit, vec![Constant], vec![0.0]).unwrap();
        assert_eq!(sieve.pi_grad(&[1.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn coefficient_length_mismatch_is_model_error() {
        assert!(matches!(LogisticModel::new(vec![0.0], vec![Constant, Coordinate(1)]), Err(Error::Model(_))));
    }

    #[test]
    fn probabilities_stay_inside_unit_interval() {
        let m = logistic(&[1.0], "x1");
        for x in [-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6] {
            let p = m.pi(&[x]).unwrap();
            assert!(p > 0.0 && p < 1.0, "x={x} p={p}");
        }
        let probit = SieveModel::new(Link::Probit, vec![Coordinate(1)], vec![1.0]).unwrap();
        for x in [-50.0, 0.0, 50.0] {
            let p = probit.pi(&[x]).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
        assert!((probit.pi(&[0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clipping_zeroes_the_derivative() {
        let (p, dp, clipped) = Link::Logit.clipped(-30.0);
        assert_eq!((p, dp, clipped), (PI_CLIP, 0.0, true));
        let (p, _, clipped) = Link::Logit.clipped(0.3);
        assert!(!clipped && (p - expit(0.3)).abs() == 0.0);
    }

    #[test]
    fn intercept_only_mle_is_sample_proportion() {
        let t = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let s = ObservedSample::new(rows, t.to_vec(), vec![0.0; 10]).unwrap();
        let m = fit_mle(&s, &[Constant]).unwrap();
        assert!((m.coefficients()[0] - logit(0.3)).abs() < 1e-10);
        assert!(m.fitted(&s).unwrap().iter().all(|p| (p - 0.3).abs() < 1e-10));
    }

    #[test]
    fn two_group_mle_matches_closed_form() {
        // x in {0, 1}; group 0 has 2/8 treated, group 1 has 5/8 treated.
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for (x, treated) in [(0.0, 2), (1.0, 5)] {
            for k in 0..8 {
                rows.push(vec![x]);
                t.push(u8::from(k < treated));
            }
        }
        let s = ObservedSample::new(rows, t, vec![0.0; 16]).unwrap();
        let m = fit_mle(&s, &[Constant, Coordinate(1)]).unwrap();
        let b0 = logit(2.0 / 8.0);
        let b1 = logit(5.0 / 8.0) - b0;
        assert!((m.coefficients()[0] - b0).abs() < 1e-9);
        assert!((m.coefficients()[1] - b1).abs() < 1e-9);
    }

    #[test]
    fn balanced_alternating_treatment_gives_zero_slope() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i / 2) as f64]).collect();
        let t: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let s = ObservedSample::new(rows, t, vec![0.0; 20]).unwrap();
        let m = fit_mle(&s, &[Constant, Coordinate(1)]).unwrap();
        assert!(m.coefficients()[1].abs() < 1e-10);
        assert!(m.coefficients()[0].abs() < 1e-10);
    }

    #[test]
    fn complete_separation_fails() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let t: Vec<u8> = (0..10).map(|i| u8::from(i >= 5)).collect();
        let s = ObservedSample::new(rows, t, vec![0.0; 10]).unwrap();
        assert!(matches!(fit_mle(&s, &[Constant, Coordinate(1)]), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn rank_deficient_map_fails() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![(i % 3) as f64]).collect();
        let t: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let s = ObservedSample::new(rows, t, vec![0.0; 10]).unwrap();
        let r = fit_mle(&s, &[Constant, Coordinate(1), Coordinate(1)]);
        assert!(matches!(r, Err(Error::NonConvergence { .. })));
    }
}
