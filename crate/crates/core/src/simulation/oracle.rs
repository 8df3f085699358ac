//! Monte Carlo evaluation of the first-order bias of CBPS-weighted IPTW under
//! an exponentially tilted propensity, and the balancing function that
//! removes it.
//!
//! With `pi = pi_{beta*}`, `b` the working covariate map and `dpi = pi (1-pi) b`,
//!
//! ```text
//! B = E[u (K + (1-pi) L) / (1-pi)] - H_y' (H_f' W H_f)^{-1} H_f' W E[u f / (1-pi)]
//! H_y = -E[(K + (1-pi) L) b],   H_f = -E[f b'].
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dgp::{replication_rng, DgpSpec, Scenario};
use crate::design::ObservedSample;
use crate::error::{Error, Result};

/// Number of covariate-map coordinates `(1, x1, .., x4)`.
const Q: usize = 5;
const BATCHES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleWeighting {
    #[default]
    Identity,
    InverseOmega,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub b: f64,
    /// Batch-means standard error of `b`.
    pub std_error: f64,
    pub draws: usize,
}

/// `(f1, 1, x2, x3, x4)` with `f1 = pi K + (1 - pi)(K + L)`.
pub fn optimal_f(spec: &DgpSpec, x: &[f64]) -> Vec<f64> {
    let p = spec.base_propensity(x);
    let (k, l) = spec.outcome_means(x);
    vec![p * k + (1.0 - p) * (k + l), 1.0, x[1], x[2], x[3]]
}

/// Optimal balancing functions evaluated for every unit (n x 5).
pub fn make_optimal_f(spec: &DgpSpec, sample: &ObservedSample) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..sample.n()).map(|i| optimal_f(spec, sample.row(i))).collect();
    DMatrix::from_fn(sample.n(), Q, |i, k| rows[i][k])
}

#[derive(Clone)]
struct Accumulator {
    count: usize,
    direct: f64,
    direct_abs: f64,
    h_y: DVector<f64>,
    h_f: DMatrix<f64>,
    uf: DVector<f64>,
    omega: DMatrix<f64>,
}

impl Accumulator {
    fn new(m: usize) -> Self {
        Self {
            count: 0,
            direct: 0.0,
            direct_abs: 0.0,
            h_y: DVector::zeros(Q),
            h_f: DMatrix::zeros(m, Q),
            uf: DVector::zeros(m),
            omega: DMatrix::zeros(m, m),
        }
    }

    fn add(&mut self, spec: &DgpSpec, x: &[f64], f: &DVector<f64>) {
        let p = spec.base_propensity(x);
        let (k, l) = spec.outcome_means(x);
        let u = spec.u_direction.eval_unchecked(x);
        let b = DVector::from_column_slice(&[1.0, x[0], x[1], x[2], x[3]]);
        let combined = k + (1.0 - p) * l;
        let direct = u * combined / (1.0 - p);
        self.count += 1;
        self.direct += direct;
        self.direct_abs += direct.abs();
        self.h_y.axpy(-combined, &b, 1.0);
        self.h_f.ger(-1.0, f, &b, 1.0);
        self.uf.axpy(u / (1.0 - p), f, 1.0);
        self.omega.ger(1.0 / (p * (1.0 - p)), f, f, 1.0);
    }

    fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.direct += other.direct;
        self.direct_abs += other.direct_abs;
        self.h_y += &other.h_y;
        self.h_f += &other.h_f;
        self.uf += &other.uf;
        self.omega += &other.omega;
    }

    fn bias(&self, weighting: OracleWeighting) -> Result<f64> {
        let n = self.count as f64;
        let (h_y, h_f, uf) = (&self.h_y / n, &self.h_f / n, &self.uf / n);
        // (H' W H)^{-1} H' W uf as the least-squares solution of the
        // whitened system C^{-1} H z = C^{-1} uf with W = (C C')^{-1}
        let (h, rhs) = match weighting {
            OracleWeighting::Identity => (h_f, uf),
            OracleWeighting::InverseOmega => {
                let chol = (&self.omega / n)
                    .cholesky()
                    .ok_or_else(|| Error::SingularDesign("oracle Omega is not positive definite".into()))?;
                let c = chol.l();
                let h = c.solve_lower_triangular(&h_f).expect("Cholesky factor is invertible");
                let rhs = c.solve_lower_triangular(&uf).expect("Cholesky factor is invertible");
                (h, rhs)
            }
        };
        let svd = h.svd(true, true);
        if !(svd.singular_values.min() > 1e-12 * svd.singular_values.max()) {
            return Err(Error::SingularDesign("H_f' W H_f is singular".into()));
        }
        let z = svd.solve(&rhs, 0.0).map_err(|e| Error::SingularDesign(e.to_string()))?;
        let correction = h_y.dot(&z);
        Ok(self.direct / n - correction)
    }
}

/// Bias constant `B` for balancing functions `f` (at least 5 of them) at
/// the untilted working coefficients of `spec`.
pub fn bias_oracle_b(
    spec: &DgpSpec,
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    draws: usize,
    seed: u64,
    weighting: OracleWeighting,
) -> Result<OracleEstimate> {
    spec.validate()?;
    if !matches!(spec.scenario, Scenario::PsLocal | Scenario::Custom) {
        return Err(Error::Config(format!("bias oracle needs a locally misspecified scenario, got {}", spec.scenario)));
    }
    if draws < 2 * BATCHES {
        return Err(Error::Config(format!("bias oracle needs at least {} draws", 2 * BATCHES)));
    }
    let mut rng = replication_rng(seed, 0);
    let m = f(&spec.draw_covariates(&mut rng)).len();
    if m < Q {
        return Err(Error::Config(format!("{m} balancing functions for {Q} propensity parameters")));
    }
    let mut batches = vec![Accumulator::new(m); BATCHES];
    for i in 0..draws {
        let x = spec.draw_covariates(&mut rng);
        let fx = f(&x);
        if fx.len() != m || fx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("balancing functions returned an inconsistent or non-finite vector".into()));
        }
        batches[i * BATCHES / draws].add(spec, &x, &DVector::from_vec(fx));
    }
    let mut pooled = Accumulator::new(m);
    let mut per_batch = Vec::with_capacity(BATCHES);
    for acc in &batches {
        pooled.merge(acc);
        per_batch.push(acc.bias(weighting)?);
    }
    let b = pooled.bias(weighting)?;
    let mean = per_batch.iter().sum::<f64>() / BATCHES as f64;
    let var = per_batch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
    // the optimal f cancels B exactly, so the batch spread is pure rounding;
    // keep the error bar at least at the rounding scale of the pooled sums,
    // which grows like sqrt(draws)
    let rounding = 64.0 * f64::EPSILON * (draws as f64).sqrt() * pooled.direct_abs / pooled.count as f64;
    let std_error = (var / BATCHES as f64).sqrt().max(rounding);
    Ok(OracleEstimate { b, std_error, draws })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimal_f_examples() {
        let spec = DgpSpec::new(Scenario::PsLocal, 1000, 0.0);
        let f = optimal_f(&spec, &[3.0, 0.0, 0.0, 0.0]);
        assert!((f[0] - 241.1).abs() < 1e-12);
        assert_eq!(&f[1..], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_requires_local_scenario() {
        let spec = DgpSpec::new(Scenario::BothCorrect, 1000, 0.0);
        let f = |x: &[f64]| vec![1.0, x[0], x[1], x[2], x[3]];
        assert!(matches!(bias_oracle_b(&spec, &f, 1000, 1, OracleWeighting::Identity), Err(Error::Config(_))));
    }

    #[test]
    fn optimal_f_kills_bias() {
        let spec = DgpSpec::new(Scenario::PsLocal, 1000, 0.5);
        let f = |x: &[f64]| optimal_f(&spec, x);
        let est = bias_oracle_b(&spec, &f, 4000, 3, OracleWeighting::Identity).unwrap();
        assert!(est.b.abs() <= 3.0 * est.std_error, "{est:?}");
    }
}
