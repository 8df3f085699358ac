//! Treatment-effect estimators built on fitted propensity models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{design_matrix, BalanceSpec, CovariateFunction, ObservedSample};
use crate::error::{Error, Result};
use crate::gmm::{FitResult, GmmOptions, MomentSystem};
use crate::propensity::{fit_mle, Link, LogisticModel, PropensityModel, SieveModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    #[default]
    Ate,
    Att,
}

fn check_probabilities(sample: &ObservedSample, pi: &[f64]) -> Result<()> {
    if pi.len() != sample.n() {
        return Err(Error::Dimension(format!("{} probabilities for {} units", pi.len(), sample.n())));
    }
    if let Some(i) = pi.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Evaluation(format!("probability of unit {} is {} (outside (0,1))", i + 1, pi[i])));
    }
    Ok(())
}

/// Horvitz-Thompson estimate `(1/n) sum [T Y / pi - (1-T) Y / (1-pi)]`.
pub fn iptw(sample: &ObservedSample, pi: &[f64]) -> Result<f64> {
    check_probabilities(sample, pi)?;
    let n = sample.n() as f64;
    let total: f64 = sample
        .treatment()
        .iter()
        .zip(sample.outcome())
        .zip(pi)
        .map(|((&t, &y), &p)| t * y / p - (1.0 - t) * y / (1.0 - p))
        .sum();
    let mu = total / n;
    if !mu.is_finite() {
        return Err(Error::Evaluation("IPTW estimate is not finite".into()));
    }
    Ok(mu)
}

/// Linear outcome plug-ins: `K(x) = alpha1' h1(x)` from controls and
/// `L(x) = alpha2' h2(x)` from the treated residuals `Y - K(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFits {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    /// Residual variance among controls.
    pub sigma0_sq: f64,
    /// Residual variance among treated units.
    pub sigma1_sq: f64,
}

impl OutcomeFits {
    pub fn new(alpha1: Vec<f64>, alpha2: Vec<f64>, sigma0_sq: f64, sigma1_sq: f64) -> Self {
        Self { alpha1, alpha2, sigma0_sq, sigma1_sq }
    }

    pub fn zeros(spec: &BalanceSpec) -> Self {
        Self::new(vec![0.0; spec.m1()], vec![0.0; spec.m2()], 0.0, 0.0)
    }

    fn check(&self, spec: &BalanceSpec) -> Result<()> {
        if self.alpha1.len() != spec.m1() || self.alpha2.len() != spec.m2() {
            return Err(Error::Dimension(format!(
                "outcome coefficients ({}, {}) do not match blocks ({}, {})",
                self.alpha1.len(),
                self.alpha2.len(),
                spec.m1(),
                spec.m2()
            )));
        }
        Ok(())
    }

    /// Stacked coefficient vector `(alpha1, alpha2)`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.alpha1.len() + self.alpha2.len(),
            self.alpha1.iter().chain(&self.alpha2).copied(),
        )
    }

    /// Per-unit `(K_i, L_i)`.
    pub fn predict(&self, sample: &ObservedSample, spec: &BalanceSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(spec)?;
        let k = design_matrix(spec.h1(), sample)? * DVector::from_column_slice(&self.alpha1);
        let l = if spec.m2() == 0 {
            vec![0.0; sample.n()]
        } else {
            (design_matrix(spec.h2(), sample)? * DVector::from_column_slice(&self.alpha2)).data.into()
        };
        Ok((k.data.into(), l))
    }
}

/// Least squares with a rank check on the singular values.
pub(crate) fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let (rows, cols) = design.shape();
    if cols == 0 {
        return Ok(DVector::zeros(0));
    }
    if rows < cols {
        return Err(Error::SingularDesign(format!("{what}: {rows} observations for {cols} coefficients")));
    }
    let svd = design.clone().svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 1e-10 * smax) {
        return Err(Error::SingularDesign(format!("{what}: design is rank deficient")));
    }
    svd.solve(y, 0.0).map_err(|e| Error::SingularDesign(format!("{what}: {e}")))
}

fn arm_rows(sample: &ObservedSample, treated: bool) -> Vec<usize> {
    (0..sample.n()).filter(|&i| sample.is_treated(i) == treated).collect()
}

/// Fits the outcome plug-ins used by AIPW and the variance estimators.
pub fn fit_outcomes(sample: &ObservedSample, spec: &BalanceSpec) -> Result<OutcomeFits> {
    spec.check_dimension(sample.d())?;
    let y = sample.outcome();
    let controls = arm_rows(sample, false);
    let treated = arm_rows(sample, true);

    let h1_controls = DMatrix::from_fn(controls.len(), spec.m1(), |r, k| spec.h1()[k].eval_unchecked(sample.row(controls[r])));
    let y0 = DVector::from_iterator(controls.len(), controls.iter().map(|&i| y[i]));
    let alpha1 = least_squares(&h1_controls, &y0, "control outcome regression on h1")?;
    let rss0 = (&y0 - &h1_controls * &alpha1).norm_squared();

    let h1_treated = DMatrix::from_fn(treated.len(), spec.m1(), |r, k| spec.h1()[k].eval_unchecked(sample.row(treated[r])));
    let resid1 = DVector::from_iterator(treated.len(), treated.iter().map(|&i| y[i])) - &h1_treated * &alpha1;
    let h2_treated = DMatrix::from_fn(treated.len(), spec.m2(), |r, k| spec.h2()[k].eval_unchecked(sample.row(treated[r])));
    let alpha2 = least_squares(&h2_treated, &resid1, "treated residual regression on h2")?;
    let rss1 = (&resid1 - &h2_treated * &alpha2).norm_squared();

    let dof = |count: usize, params: usize| if count > params { (count - params) as f64 } else { count as f64 };
    Ok(OutcomeFits {
        alpha1: alpha1.iter().copied().collect(),
        alpha2: alpha2.iter().copied().collect(),
        sigma0_sq: rss0 / dof(controls.len(), spec.m1()),
        sigma1_sq: rss1 / dof(treated.len(), spec.m2()),
    })
}

/// Augmented IPW with linear outcome plug-ins `K = alpha1' h1`, `L = alpha2' h2`.
pub fn aipw(sample: &ObservedSample, pi: &[f64], fits: &OutcomeFits, spec: &BalanceSpec) -> Result<f64> {
    check_probabilities(sample, pi)?;
    let (k, l) = fits.predict(sample, spec)?;
    let n = sample.n() as f64;
    let mut total = 0.0;
    for i in 0..sample.n() {
        let (t, y, p) = (sample.treatment()[i], sample.outcome()[i], pi[i]);
        total += t * y / p - (1.0 - t) * y / (1.0 - p) - (t - p) * ((k[i] + l[i]) / p + k[i] / (1.0 - p));
    }
    let mu = total / n;
    if !mu.is_finite() {
        return Err(Error::Evaluation("AIPW estimate is not finite".into()));
    }
    Ok(mu)
}

/// A balancing fit and the IPTW estimate built from it.
#[derive(Debug, Clone)]
pub struct WeightingFit {
    pub fit: FitResult,
    /// Fitted probabilities at the solution (as used in the balance equations).
    pub pi: Vec<f64>,
    pub estimate: f64,
}

fn weighting_fit(system: &MomentSystem<'_>, sample: &ObservedSample, options: &GmmOptions) -> Result<WeightingFit> {
    let fit = system.solve(options)?;
    let pi = system.propensities(&fit.beta_hat)?.pi;
    let estimate = iptw(sample, &pi)?;
    Ok(WeightingFit { fit, pi, estimate })
}

/// Optimal CBPS: solve the two-block system, then weight.
pub fn fit_ocbps_ate(
    sample: &ObservedSample,
    spec: &BalanceSpec,
    map: &[CovariateFunction],
    options: &GmmOptions,
) -> Result<WeightingFit> {
    let system = MomentSystem::ocbps(sample, spec, map, Link::Logit)?;
    weighting_fit(&system, sample, options)
}

/// Standard CBPS balancing `f`, then weight.
pub fn fit_cbps_ate(
    sample: &ObservedSample,
    f: &[CovariateFunction],
    map: &[CovariateFunction],
    options: &GmmOptions,
) -> Result<WeightingFit> {
    let system = MomentSystem::cbps(sample, f, map, Link::Logit)?;
    weighting_fit(&system, sample, options)
}

/// Maximum-likelihood propensity with IPTW.
pub fn fit_glm_ate(sample: &ObservedSample, map: &[CovariateFunction]) -> Result<(LogisticModel, Vec<f64>, f64)> {
    let model = fit_mle(sample, map)?;
    let pi = model.fitted(sample)?;
    let estimate = iptw(sample, &pi)?;
    Ok((model, pi, estimate))
}

#[derive(Debug, Clone)]
pub struct AttFit {
    pub fit: FitResult,
    pub pi: Vec<f64>,
    pub tau: f64,
    pub tau1: f64,
    pub tau0: f64,
}

/// Treated mean minus the odds-weighted control mean.
pub fn att_from_probabilities(sample: &ObservedSample, pi: &[f64]) -> Result<(f64, f64, f64)> {
    check_probabilities(sample, pi)?;
    let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..sample.n() {
        let (t, y) = (sample.treatment()[i], sample.outcome()[i]);
        let odds = pi[i] / (1.0 - pi[i]);
        num1 += t * y;
        den1 += t;
        num0 += (1.0 - t) * odds * y;
        den0 += (1.0 - t) * odds;
    }
    if !(den1 > 0.0) {
        return Err(Error::Degenerate("no treated units".into()));
    }
    if !(den0 > 0.0 && den0.is_finite()) {
        return Err(Error::Degenerate("control weights sum to zero".into()));
    }
    let (tau1, tau0) = (num1 / den1, num0 / den0);
    Ok((tau1 - tau0, tau1, tau0))
}

/// ATT by balancing `f` under treated-population weights.
pub fn fit_att(
    sample: &ObservedSample,
    f: &[CovariateFunction],
    map: &[CovariateFunction],
    options: &GmmOptions,
) -> Result<AttFit> {
    let system = MomentSystem::att(sample, f, map, Link::Logit)?;
    let fit = system.solve(options)?;
    let pi = system.propensities(&fit.beta_hat)?.pi;
    let (tau, tau1, tau0) = att_from_probabilities(sample, &pi)?;
    Ok(AttFit { fit, pi, tau, tau1, tau0 })
}

#[derive(Debug, Clone)]
pub struct SieveFit {
    pub fit: FitResult,
    pub model: SieveModel,
    pub pi: Vec<f64>,
    pub estimate: f64,
    pub warnings: Vec<String>,
}

/// Sieve optimal CBPS with `kappa = m` basis functions (default `h1` then `h2`).
pub fn fit_ocbps_sieve(
    sample: &ObservedSample,
    spec: &BalanceSpec,
    basis: Option<&[CovariateFunction]>,
    link: Link,
    options: &GmmOptions,
) -> Result<SieveFit> {
    let basis: Vec<CovariateFunction> = match basis {
        Some(b) => b.to_vec(),
        None => spec.union(),
    };
    let kappa = basis.len();
    if kappa != spec.m() {
        return Err(Error::Config(format!(
            "sieve basis has {kappa} functions but the balance blocks have m = {}",
            spec.m()
        )));
    }
    let mut warnings = Vec::new();
    let rate_bound = (sample.n() as f64).cbrt();
    if kappa as f64 > rate_bound {
        let msg = format!("sieve dimension {kappa} exceeds n^(1/3) = {rate_bound:.2}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let system = MomentSystem::ocbps(sample, spec, &basis, link)?;
    let fit = system.solve(options)?;
    let pi = system.propensities(&fit.beta_hat)?.pi;
    let estimate = iptw(sample, &pi)?;
    let model = SieveModel::new(link, basis, fit.beta_hat.iter().copied().collect())?;
    Ok(SieveFit { fit, model, pi, estimate, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::parse_function_spec;

    fn toy(t: &[u8], y: &[f64]) -> ObservedSample {
        let rows = (0..t.len()).map(|i| vec![i as f64]).collect();
        ObservedSample::new(rows, t.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn iptw_examples() {
        let s = toy(&[1, 0], &[3.0, 1.0]);
        assert_eq!(iptw(&s, &[0.5, 0.5]).unwrap(), 2.0);
        assert_eq!(iptw(&s, &[0.25, 0.75]).unwrap(), 4.0);
        let zero = toy(&[1, 0, 1], &[0.0; 3]);
        assert_eq!(iptw(&zero, &[0.1, 0.7, 0.9]).unwrap(), 0.0);
        assert!(iptw(&s, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn aipw_with_zero_outcome_model_is_iptw() {
        let s = toy(&[1, 0, 1, 0], &[3.0, 1.0, -2.0, 5.0]);
        let spec = BalanceSpec::parse("1,x1", "1").unwrap();
        let pi = [0.3, 0.6, 0.5, 0.2];
        assert_eq!(aipw(&s, &pi, &OutcomeFits::zeros(&spec), &spec).unwrap(), iptw(&s, &pi).unwrap());
    }

    #[test]
    fn aipw_hand_computed() {
        // n = 2, T = (1,0), Y = (3,1), pi = (0.5,0.5), K = 1, L = 0
        let s = toy(&[1, 0], &[3.0, 1.0]);
        let spec = BalanceSpec::parse("1", "").unwrap();
        let fits = OutcomeFits::new(vec![1.0], vec![], 0.0, 0.0);
        // unit 1: 6 - 0.5 * (2 + 2) = 4; unit 2: -2 + 0.5 * (2 + 2) = 0
        assert!((aipw(&s, &[0.5, 0.5], &fits, &spec).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn att_examples() {
        let s = toy(&[1, 1, 0, 0], &[2.0, 4.0, 1.0, 3.0]);
        let (tau, tau1, tau0) = att_from_probabilities(&s, &[0.5; 4]).unwrap();
        assert_eq!((tau, tau1, tau0), (1.0, 3.0, 2.0));
    }

    #[test]
    fn outcome_fit_examples() {
        let s = toy(&[1, 0, 0, 1, 0], &[9.0, 4.0, 4.0, 1.0, 4.0]);
        let spec = BalanceSpec::parse("1", "").unwrap();
        let fits = fit_outcomes(&s, &spec).unwrap();
        assert!((fits.alpha1[0] - 4.0).abs() < 1e-12);
        assert!(fits.sigma0_sq.abs() < 1e-20);

        // Y(0) = 1 + 2 x1 exactly among controls
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.5, (i * i) as f64]).collect();
        let t: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = rows.iter().zip(&t).map(|(r, &t)| 1.0 + 2.0 * r[0] + f64::from(t) * 7.0).collect();
        let s = ObservedSample::new(rows, t, y).unwrap();
        let spec = BalanceSpec::parse("1,x1", "1").unwrap();
        let fits = fit_outcomes(&s, &spec).unwrap();
        assert!((fits.alpha1[0] - 1.0).abs() < 1e-10 && (fits.alpha1[1] - 2.0).abs() < 1e-10);
        assert!((fits.alpha2[0] - 7.0).abs() < 1e-10);
    }

    #[test]
    fn outcome_fit_rank_deficiency() {
        let s = toy(&[1, 0, 0, 1, 0], &[1.0; 5]);
        let spec = BalanceSpec::new(parse_function_spec("1,x1^2").unwrap(), vec![]).unwrap();
        assert!(fit_outcomes(&s, &spec).is_ok());
        let spec = BalanceSpec::parse("1,x1,x1*x1,x1^3", "").unwrap();
        assert!(matches!(fit_outcomes(&s, &spec), Err(Error::SingularDesign(_))));
    }

    #[test]
    fn sieve_basis_must_match_moment_count() {
        let s = toy(&[1, 0, 0, 1, 0, 1], &[1.0; 6]);
        let spec = BalanceSpec::parse("1,x1", "1").unwrap();
        let r = fit_ocbps_sieve(&s, &spec, None, Link::Logit, &GmmOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
