//! Balancing moment systems and the GMM solver.
//!
//! A [`MomentSystem`] pairs a propensity index design (`n x q`, the basis the
//! coefficients act on) with a balance design (`n x m`, the functions being
//! balanced). Every unit contributes `g_i = w(T_i, pi_i) * f(X_i)`, where the
//! weight `w` depends on the moment kind and, for optimal CBPS, on the block.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::design::{design_matrix, BalanceSpec, CovariateFunction, ObservedSample};
use crate::error::{Error, Result};
use crate::propensity::{fit_logistic_design, Link};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    /// `(T/pi - (1-T)/(1-pi)) f(X)`.
    Cbps,
    /// First `m1` columns balanced as in [`MomentKind::Cbps`]; the rest use
    /// `(T/pi - 1) h2(X)`.
    Ocbps { m1: usize },
    /// `(T - (1-T) pi/(1-pi)) f(X)`, the treated-population weighting.
    Att,
}

/// Per-unit propensities at a given coefficient vector.
#[derive(Debug, Clone)]
pub struct Propensities {
    pub pi: Vec<f64>,
    /// `dpi/dz` at the linear index; zero where the probability was clipped.
    pub slope: Vec<f64>,
    pub clip_events: usize,
}

#[derive(Debug, Clone)]
pub struct MomentSystem<'a> {
    kind: MomentKind,
    link: Link,
    basis: DMatrix<f64>,
    balance: DMatrix<f64>,
    treatment: &'a [f64],
}

impl<'a> MomentSystem<'a> {
    pub fn from_design(
        kind: MomentKind,
        link: Link,
        basis: DMatrix<f64>,
        balance: DMatrix<f64>,
        treatment: &'a [f64],
    ) -> Result<Self> {
        let n = treatment.len();
        if basis.nrows() != n || balance.nrows() != n {
            return Err(Error::Dimension(format!(
                "designs have {} and {} rows for {n} units",
                basis.nrows(),
                balance.nrows()
            )));
        }
        let (m, q) = (balance.ncols(), basis.ncols());
        if q == 0 {
            return Err(Error::Model("propensity basis is empty".into()));
        }
        if m < q {
            return Err(Error::Config(format!(
                "{m} moment conditions cannot identify {q} propensity coefficients"
            )));
        }
        if let MomentKind::Ocbps { m1 } = kind {
            if m1 > m {
                return Err(Error::Config(format!("h1 block size {m1} invalid for m={m}")));
            }
        }
        if basis.iter().chain(balance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("design contains non-finite values".into()));
        }
        Ok(Self { kind, link, basis, balance, treatment })
    }

    /// Plain covariate balancing with functions `f`.
    pub fn cbps(
        sample: &'a ObservedSample,
        f: &[CovariateFunction],
        map: &[CovariateFunction],
        link: Link,
    ) -> Result<Self> {
        Self::from_design(
            MomentKind::Cbps,
            link,
            design_matrix(map, sample)?,
            design_matrix(f, sample)?,
            sample.treatment(),
        )
    }

    /// The two-block optimal CBPS system.
    pub fn ocbps(
        sample: &'a ObservedSample,
        spec: &BalanceSpec,
        map: &[CovariateFunction],
        link: Link,
    ) -> Result<Self> {
        let mut fns = spec.h1().to_vec();
        fns.extend_from_slice(spec.h2());
        Self::from_design(
            MomentKind::Ocbps { m1: spec.m1() },
            link,
            design_matrix(map, sample)?,
            design_matrix(&fns, sample)?,
            sample.treatment(),
        )
    }

    pub fn att(
        sample: &'a ObservedSample,
        f: &[CovariateFunction],
        map: &[CovariateFunction],
        link: Link,
    ) -> Result<Self> {
        Self::from_design(
            MomentKind::Att,
            link,
            design_matrix(map, sample)?,
            design_matrix(f, sample)?,
            sample.treatment(),
        )
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }
    pub fn link(&self) -> Link {
        self.link
    }
    pub fn n(&self) -> usize {
        self.treatment.len()
    }
    pub fn m(&self) -> usize {
        self.balance.ncols()
    }
    pub fn q(&self) -> usize {
        self.basis.ncols()
    }
    pub fn is_just_identified(&self) -> bool {
        self.m() == self.q()
    }
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
    pub fn balance(&self) -> &DMatrix<f64> {
        &self.balance
    }
    pub fn treatment(&self) -> &[f64] {
        self.treatment
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.q() {
            return Err(Error::Dimension(format!("beta has length {}, expected {}", beta.len(), self.q())));
        }
        Ok(())
    }

    pub fn propensities(&self, beta: &DVector<f64>) -> Result<Propensities> {
        self.check_beta(beta)?;
        let z = &self.basis * beta;
        let mut pi = Vec::with_capacity(self.n());
        let mut slope = Vec::with_capacity(self.n());
        let mut clip_events = 0;
        for &zi in z.iter() {
            let (p, dp, clipped) = self.link.clipped(zi);
            pi.push(p);
            slope.push(dp);
            clip_events += usize::from(clipped);
        }
        Ok(Propensities { pi, slope, clip_events })
    }

    /// Weight of column `k` for a unit and its derivative with respect to pi.
    fn column_weight(&self, k: usize, t: f64, p: f64) -> (f64, f64) {
        let balanced = || (t / p - (1.0 - t) / (1.0 - p), -t / (p * p) - (1.0 - t) / ((1.0 - p) * (1.0 - p)));
        match self.kind {
            MomentKind::Cbps => balanced(),
            MomentKind::Ocbps { m1 } if k < m1 => balanced(),
            MomentKind::Ocbps { .. } => (t / p - 1.0, -t / (p * p)),
            MomentKind::Att => (t - (1.0 - t) * p / (1.0 - p), -(1.0 - t) / ((1.0 - p) * (1.0 - p))),
        }
    }

    fn unit_moments_at(&self, props: &Propensities) -> Result<DMatrix<f64>> {
        let g = DMatrix::from_fn(self.n(), self.m(), |i, k| {
            self.column_weight(k, self.treatment[i], props.pi[i]).0 * self.balance[(i, k)]
        });
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("moment contributions are not finite".into()));
        }
        Ok(g)
    }

    /// Per-unit contributions `g_i`, as an `n x m` matrix.
    pub fn unit_moments(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.unit_moments_at(&self.propensities(beta)?)
    }

    /// Sample moment vector `(1/n) sum_i g_i`.
    pub fn eval_moments(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.unit_moments(beta)?;
        Ok(column_means(&g))
    }

    fn jacobian_at(&self, props: &Propensities) -> Result<DMatrix<f64>> {
        let n = self.n() as f64;
        let scaled = DMatrix::from_fn(self.n(), self.m(), |i, k| {
            let dw = self.column_weight(k, self.treatment[i], props.pi[i]).1;
            dw * props.slope[i] * self.balance[(i, k)]
        });
        let jac = scaled.tr_mul(&self.basis) / n;
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("moment Jacobian is not finite".into()));
        }
        Ok(jac)
    }

    /// Analytic `m x q` Jacobian of the sample moments.
    pub fn eval_jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.jacobian_at(&self.propensities(beta)?)
    }

    /// `(1/n) sum_i g_i g_i'`.
    pub fn estimate_omega(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g = self.unit_moments(beta)?;
        Ok(second_moment(&g))
    }
}

pub(crate) fn column_means(g: &DMatrix<f64>) -> DVector<f64> {
    let n = g.nrows() as f64;
    DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum() / n))
}

/// `(1/n) G'G`, symmetrised so the result is bit-exactly symmetric.
pub(crate) fn second_moment(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows() as f64;
    let mut omega = g.tr_mul(g) / n;
    for i in 0..omega.nrows() {
        for j in 0..i {
            let v = omega[(i, j)];
            omega[(j, i)] = v;
        }
    }
    omega
}

/// `omega + 1e-8 * tr(omega)/m * I`.
pub(crate) fn ridged(omega: &DMatrix<f64>) -> DMatrix<f64> {
    let m = omega.nrows();
    let ridge = 1e-8 * omega.trace() / m as f64;
    omega + DMatrix::identity(m, m) * ridge
}

/// Inverse of the ridged matrix `omega + 1e-8 * tr(omega)/m * I`.
pub fn ridged_inverse(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ridged(omega)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularDesign("moment covariance is not positive definite".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Identity,
    /// Identity first stage, then the ridged inverse of the moment covariance.
    TwoStep,
    Fixed(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Mle,
    Zeros,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmOptions {
    pub weighting: Weighting,
    /// Defaults to 1e-10 (residual, just-identified) or 1e-8 (gradient, over-identified).
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub init: Init,
    pub restarts: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { weighting: Weighting::TwoStep, tol: None, max_iter: 200, init: Init::Mle, restarts: 3 }
    }
}

impl GmmOptions {
    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    fn tolerance(&self, just_identified: bool) -> f64 {
        self.tol.unwrap_or(if just_identified { 1e-10 } else { 1e-8 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    /// Sample moments at `beta_hat`.
    pub residual: DVector<f64>,
    pub weight_used: DMatrix<f64>,
    /// `residual' W residual`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Units whose probability was clipped at `beta_hat`.
    pub clip_events: usize,
    /// Max-norm of the residual (just-identified) or objective gradient.
    pub criterion_norm: f64,
}

impl FitResult {
    pub fn max_residual(&self) -> f64 {
        self.residual.amax()
    }
}

struct Stage {
    beta: DVector<f64>,
    objective: f64,
    criterion: f64,
    iterations: usize,
    converged: bool,
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;
const DIVERGENCE_BOUND: f64 = 1e3;
const POLISH_STEPS: usize = 4;

/// Damped Gauss-Newton on `r' W r` with `W = L L'` given by `whiten = L'`.
fn levenberg_marquardt(
    system: &MomentSystem<'_>,
    beta0: DVector<f64>,
    whiten: Option<&DMatrix<f64>>,
    tol: f64,
    max_iter: usize,
) -> Stage {
    let just = system.is_just_identified() && whiten.is_none();
    let eval = |beta: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let props = system.propensities(beta).ok()?;
        let g = system.unit_moments_at(&props).ok()?;
        let r = column_means(&g);
        let j = system.jacobian_at(&props).ok()?;
        Some(match whiten {
            Some(l) => (l * r, l * j),
            None => (r, j),
        })
    };
    // gradient of r'Wr is 2 J'W r; in whitened coordinates 2 J~' r~
    let raw_criterion = |r: &DVector<f64>, j: &DMatrix<f64>| -> f64 {
        if just { r.amax() } else { (j.tr_mul(r) * 2.0).amax() }
    };
    let mut beta = beta0;
    let Some((mut r, mut j)) = eval(&beta) else {
        return Stage { beta, objective: f64::INFINITY, criterion: f64::INFINITY, iterations: 0, converged: false };
    };
    let mut objective = r.norm_squared();
    let mut lambda = LAMBDA_INIT;
    let q = system.q();
    for iter in 0..max_iter {
        let criterion = raw_criterion(&r, &j);
        if criterion <= tol {
            if just {
                // tolerance met; finish the root with plain Newton steps so
                // identities that hold at the exact root hold to rounding
                for _ in 0..POLISH_STEPS {
                    let Some(step) = j.clone().lu().solve(&(-&r)) else { break };
                    let trial = &beta + step;
                    match eval(&trial) {
                        Some((r_t, j_t)) if r_t.norm_squared() < objective => {
                            objective = r_t.norm_squared();
                            (beta, r, j) = (trial, r_t, j_t);
                        }
                        _ => break,
                    }
                }
            }
            let criterion = raw_criterion(&r, &j);
            return Stage { beta, objective, criterion, iterations: iter, converged: true };
        }
        let jtj = j.tr_mul(&j);
        let grad = j.tr_mul(&r);
        let diag_floor = 1e-12 * (0..q).map(|k| jtj[(k, k)]).fold(0.0, f64::max).max(1e-300);
        let mut improved = false;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for k in 0..q {
                a[(k, k)] += lambda * jtj[(k, k)].max(diag_floor);
            }
            let step = a.clone().cholesky().map(|c| c.solve(&(-&grad))).or_else(|| a.lu().solve(&(-&grad)));
            if let Some(step) = step {
                let trial = &beta + step;
                if let Some((r_t, j_t)) = eval(&trial) {
                    let obj_t = r_t.norm_squared();
                    if obj_t.is_finite() && obj_t < objective {
                        beta = trial;
                        r = r_t;
                        j = j_t;
                        objective = obj_t;
                        lambda = (lambda / 10.0).max(1e-15);
                        improved = true;
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !improved || beta.amax() > DIVERGENCE_BOUND {
            let criterion = raw_criterion(&r, &j);
            let converged = criterion <= tol && beta.amax() <= DIVERGENCE_BOUND;
            return Stage { beta, objective, criterion, iterations: iter + 1, converged };
        }
    }
    let criterion = raw_criterion(&r, &j);
    Stage { beta, objective, criterion, iterations: max_iter, converged: criterion <= tol }
}

fn starting_points(system: &MomentSystem<'_>, options: &GmmOptions) -> Vec<DVector<f64>> {
    let q = system.q();
    let mut starts = Vec::new();
    match &options.init {
        Init::Mle => {
            if system.link() == Link::Logit {
                if let Ok(beta) = fit_logistic_design(system.basis(), system.treatment()) {
                    starts.push(beta);
                }
            }
        }
        Init::Fixed(b) if b.len() == q => starts.push(DVector::from_column_slice(b)),
        Init::Fixed(_) | Init::Zeros => {}
    }
    starts.push(DVector::zeros(q));
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c8b_5eed);
    for _ in 0..options.restarts {
        starts.push(DVector::from_fn(q, |_, _| rng.random_range(-0.5..=0.5)));
    }
    starts
}

fn run_stage(
    system: &MomentSystem<'_>,
    starts: &[DVector<f64>],
    weight: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Stage, usize)> {
    let whiten = if system.is_just_identified() && weight.is_identity(0.0) {
        None
    } else {
        let chol = weight
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("weighting matrix must be positive definite".into()))?;
        Some(chol.l().transpose())
    };
    let mut best: Option<Stage> = None;
    let mut total_iter = 0;
    for start in starts {
        let stage = levenberg_marquardt(system, start.clone(), whiten.as_ref(), tol, max_iter);
        total_iter += stage.iterations;
        if stage.converged {
            return Ok((stage, total_iter));
        }
        if best.as_ref().is_none_or(|b| stage.objective < b.objective) {
            best = Some(stage);
        }
    }
    let best = best.expect("at least one starting point");
    Err(Error::NonConvergence {
        method: "GMM".into(),
        iterations: total_iter,
        criterion_norm: best.criterion,
        best_beta: best.beta.iter().copied().collect(),
    })
}

/// Solves the moment system: a root of the sample moments when `m = q`,
/// otherwise the minimiser of `g' W g` with `W` chosen by `options.weighting`.
pub fn solve(system: &MomentSystem<'_>, options: &GmmOptions) -> Result<FitResult> {
    let m = system.m();
    if options.max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    if options.tol.is_some_and(|t| !(t > 0.0)) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let just = system.is_just_identified();
    let tol = options.tolerance(just);
    let starts = starting_points(system, options);
    let identity = DMatrix::identity(m, m);

    let (stage, iterations, weight) = if just {
        let (stage, it) = run_stage(system, &starts, &identity, tol, options.max_iter)?;
        (stage, it, identity)
    } else {
        match &options.weighting {
            Weighting::Identity => {
                let (stage, it) = run_stage(system, &starts, &identity, tol, options.max_iter)?;
                (stage, it, identity)
            }
            Weighting::Fixed(w) => {
                if w.nrows() != m || w.ncols() != m {
                    return Err(Error::Dimension(format!("weighting matrix must be {m} x {m}")));
                }
                let (stage, it) = run_stage(system, &starts, w, tol, options.max_iter)?;
                (stage, it, w.clone())
            }
            Weighting::TwoStep => {
                let (first, it1) = run_stage(system, &starts, &identity, tol, options.max_iter)?;
                let omega = system.estimate_omega(&first.beta)?;
                let w = ridged_inverse(&omega)?;
                let mut second_starts = vec![first.beta.clone()];
                second_starts.extend(starts.iter().cloned());
                let (stage, it2) = run_stage(system, &second_starts, &w, tol, options.max_iter)?;
                (stage, it1 + it2, w)
            }
        }
    };

    let props = system.propensities(&stage.beta)?;
    let residual = column_means(&system.unit_moments_at(&props)?);
    let jac = system.jacobian_at(&props)?;
    let sv = jac.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-10 * smax) {
        return Err(Error::SingularDesign(format!(
            "moment Jacobian is rank deficient at the solution (singular values {smin:.3e} .. {smax:.3e})"
        )));
    }
    let objective = (residual.transpose() * &weight * &residual)[(0, 0)];
    Ok(FitResult {
        beta_hat: stage.beta,
        residual,
        weight_used: weight,
        objective,
        iterations,
        converged: stage.converged,
        clip_events: props.clip_events,
        criterion_norm: stage.criterion,
    })
}

impl MomentSystem<'_> {
    pub fn solve(&self, options: &GmmOptions) -> Result<FitResult> {
        solve(self, options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::parse_function_spec;
    use crate::propensity::logit;

    fn sample(t: &[u8], x: &[f64]) -> ObservedSample {
        let rows = x.iter().map(|&v| vec![v]).collect();
        ObservedSample::new(rows, t.to_vec(), vec![0.0; t.len()]).unwrap()
    }

    fn fns(s: &str) -> Vec<CovariateFunction> {
        parse_function_spec(s).unwrap()
    }

    #[test]
    fn cbps_intercept_at_treated_fraction_is_balanced() {
        let s = sample(&[1, 0, 0, 1, 0], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let sys = MomentSystem::cbps(&s, &fns("1"), &fns("1"), Link::Logit).unwrap();
        let g = sys.eval_moments(&DVector::from_element(1, logit(0.4))).unwrap();
        assert!(g[0].abs() < 1e-14);
    }

    #[test]
    fn ocbps_hand_evaluations() {
        let s = sample(&[1, 0], &[0.0, 0.0]);
        let spec = BalanceSpec::parse("1", "").unwrap();
        let sys = MomentSystem::ocbps(&s, &spec, &fns("1"), Link::Logit).unwrap();
        assert_eq!(sys.eval_moments(&DVector::zeros(1)).unwrap()[0], 0.0);

        // index x1 with beta = 1 gives pi = (0.25, 0.75)
        let z = logit(0.25);
        let s = sample(&[1, 0], &[z, -z]);
        let spec = BalanceSpec::parse("1", "1").unwrap();
        let sys = MomentSystem::ocbps(&s, &spec, &fns("x1"), Link::Logit).unwrap();
        let g = sys.eval_moments(&DVector::from_element(1, 1.0)).unwrap();
        assert!((g[1] - 1.0).abs() < 1e-12, "{g}");
    }

    #[test]
    fn jacobian_hand_evaluations() {
        let s = sample(&[1, 0], &[0.0, 0.0]);
        let spec = BalanceSpec::parse("1", "").unwrap();
        let sys = MomentSystem::ocbps(&s, &spec, &fns("1"), Link::Logit).unwrap();
        let j = sys.eval_jacobian(&DVector::zeros(1)).unwrap();
        assert!((j[(0, 0)] + 1.0).abs() < 1e-15);

        // all treated, h2 = x1 = (1, 2, 6)
        let x = [1.0, 2.0, 6.0];
        let t = [1.0; 3];
        let basis = DMatrix::from_element(3, 1, 1.0);
        let balance = DMatrix::from_fn(3, 2, |i, k| if k == 0 { 1.0 } else { x[i] });
        let sys = MomentSystem::from_design(MomentKind::Ocbps { m1: 1 }, Link::Logit, basis, balance, &t).unwrap();
        let j = sys.eval_jacobian(&DVector::zeros(1)).unwrap();
        assert!((j[(1, 0)] + 3.0).abs() < 1e-14, "expected -mean(h2) = -3, got {}", j[(1, 0)]);
    }

    #[test]
    fn omega_constant_half() {
        let s = sample(&[1, 0, 0, 1], &[0.0; 4]);
        let sys = MomentSystem::cbps(&s, &fns("1"), &fns("1"), Link::Logit).unwrap();
        let omega = sys.estimate_omega(&DVector::zeros(1)).unwrap();
        assert_eq!(omega[(0, 0)], 4.0);
    }

    #[test]
    fn intercept_only_solutions() {
        let t = [1, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let s = sample(&t, &x);
        let ones = DMatrix::from_element(10, 1, 1.0);

        let spec = BalanceSpec::parse("1", "").unwrap();
        let fit = MomentSystem::ocbps(&s, &spec, &fns("1"), Link::Logit).unwrap().solve(&GmmOptions::default()).unwrap();
        assert!((fit.beta_hat[0] - logit(0.3)).abs() < 1e-10);

        // h2 = [1] alone: sum(T/p - 1) = 0 forces p = mean(T)
        let sys = MomentSystem::from_design(MomentKind::Ocbps { m1: 0 }, Link::Logit, ones.clone(), ones.clone(), s.treatment()).unwrap();
        let fit = sys.solve(&GmmOptions { init: Init::Zeros, ..Default::default() }).unwrap();
        assert!((fit.beta_hat[0] - logit(0.3)).abs() < 1e-10);

        // over-identified, both blocks share the root
        let sys = MomentSystem::from_design(MomentKind::Ocbps { m1: 1 }, Link::Logit, ones.clone(), DMatrix::from_element(10, 2, 1.0), s.treatment()).unwrap();
        let fit = sys.solve(&GmmOptions::default()).unwrap();
        assert!((fit.beta_hat[0] - logit(0.3)).abs() < 1e-8);
    }

    #[test]
    fn rejects_under_identified_systems() {
        let s = sample(&[1, 0, 1], &[0.0, 1.0, 2.0]);
        let r = MomentSystem::cbps(&s, &fns("1"), &fns("1,x1"), Link::Logit);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn ridged_inverse_of_singular_matrix_exists() {
        let omega = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let w = ridged_inverse(&omega).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
    }
}
