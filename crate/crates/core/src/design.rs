//! Observed data and the covariate-function mini-language.
//!
//! Functions are written as comma-separated tokens: `1`, `x<j>`, `x<j>^2`,
//! `x<j>*x<k>`. Covariate indices are 1-based. Any other monomial such as
//! `x1^3*x2` is accepted as a custom polynomial.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` units of (treatment, outcome, covariates). Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSample {
    covariates: Vec<f64>,
    treatment: Vec<f64>,
    outcome: Vec<f64>,
    d: usize,
}

impl ObservedSample {
    /// Builds a sample from per-unit covariate rows.
    pub fn new(covariates: Vec<Vec<f64>>, treatment: Vec<u8>, outcome: Vec<f64>) -> Result<Self> {
        let d = covariates.first().map_or(0, Vec::len);
        if covariates.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidSample("covariate rows have unequal lengths".into()));
        }
        let flat = covariates.into_iter().flatten().collect();
        Self::from_row_major(flat, d, treatment, outcome)
    }

    pub fn from_row_major(
        covariates: Vec<f64>,
        d: usize,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        if n < 2 {
            return Err(Error::InvalidSample(format!("need at least 2 units, got {n}")));
        }
        if d == 0 {
            return Err(Error::InvalidSample("need at least one covariate".into()));
        }
        if outcome.len() != n || covariates.len() != n * d {
            return Err(Error::InvalidSample(format!(
                "inconsistent lengths: {n} treatments, {} outcomes, {} covariate values for d={d}",
                outcome.len(),
                covariates.len()
            )));
        }
        if let Some(i) = treatment.iter().position(|&t| t > 1) {
            return Err(Error::InvalidSample(format!(
                "treatment of unit {} is {}, expected 0 or 1",
                i + 1,
                treatment[i]
            )));
        }
        if let Some(i) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidSample(format!("outcome of unit {} is not finite", i + 1)));
        }
        if let Some(k) = covariates.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidSample(format!(
                "covariate {} of unit {} is not finite",
                k % d + 1,
                k / d + 1
            )));
        }
        let n1 = treatment.iter().filter(|&&t| t == 1).count();
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidSample(
                "need at least one treated and one control unit".into(),
            ));
        }
        Ok(Self {
            covariates,
            treatment: treatment.into_iter().map(f64::from).collect(),
            outcome,
            d,
        })
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    /// Treatment indicators as 0.0 / 1.0.
    pub fn treatment(&self) -> &[f64] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.treatment[i] == 1.0
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1.0).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Same units and treatments with a different outcome vector.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        if outcome.len() != self.n() {
            return Err(Error::InvalidSample("outcome length does not match n".into()));
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidSample("outcome contains non-finite values".into()));
        }
        Ok(Self { outcome, ..self.clone() })
    }
}

/// One scalar function of the covariate vector. Indices are 1-based.
///
/// Serialized as its textual form (`x1^2`, `x1*x3`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CovariateFunction {
    Constant,
    Coordinate(usize),
    Square(usize),
    /// Product of two distinct coordinates, stored with the smaller index first.
    Interaction(usize, usize),
    /// Monomial with exponent `e[k]` on coordinate `k + 1`.
    Polynomial(Vec<u32>),
}

impl CovariateFunction {
    pub fn interaction(j: usize, k: usize) -> Self {
        Self::Interaction(j.min(k), j.max(k))
    }

    /// Builds the canonical function for a monomial given as exponents.
    pub fn monomial(exponents: &[u32]) -> Self {
        let mut exps = exponents.to_vec();
        while exps.last() == Some(&0) {
            exps.pop();
        }
        let nonzero: Vec<(usize, u32)> = exps
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(k, &e)| (k + 1, e))
            .collect();
        match nonzero.as_slice() {
            [] => Self::Constant,
            [(j, 1)] => Self::Coordinate(*j),
            [(j, 2)] => Self::Square(*j),
            [(j, 1), (k, 1)] => Self::interaction(*j, *k),
            _ => Self::Polynomial(exps),
        }
    }

    /// Exponent of each coordinate `x1..x_len`, padded or truncated to `len`.
    pub fn exponents(&self, len: usize) -> Vec<u32> {
        let mut e = vec![0; len];
        let mut bump = |j: usize, by: u32| {
            if j >= 1 && j <= len {
                e[j - 1] += by;
            }
        };
        match self {
            Self::Constant => {}
            Self::Coordinate(j) => bump(*j, 1),
            Self::Square(j) => bump(*j, 2),
            Self::Interaction(j, k) => {
                bump(*j, 1);
                bump(*k, 1);
            }
            Self::Polynomial(p) => p.iter().enumerate().for_each(|(k, &x)| bump(k + 1, x)),
        }
        e
    }

    /// Largest covariate index referenced (0 for the constant).
    pub fn max_index(&self) -> usize {
        match self {
            Self::Constant => 0,
            Self::Coordinate(j) | Self::Square(j) => *j,
            Self::Interaction(j, k) => (*j).max(*k),
            Self::Polynomial(e) => e.iter().rposition(|&p| p > 0).map_or(0, |k| k + 1),
        }
    }

    fn min_index(&self) -> Option<usize> {
        match self {
            Self::Constant => None,
            Self::Coordinate(j) | Self::Square(j) => Some(*j),
            Self::Interaction(j, k) => Some((*j).min(*k)),
            Self::Polynomial(e) => e.iter().position(|&p| p > 0).map(|k| k + 1),
        }
    }

    pub fn check_dimension(&self, d: usize) -> Result<()> {
        if self.min_index() == Some(0) {
            return Err(Error::Dimension(format!("`{self}` uses covariate index 0; indices are 1-based")));
        }
        if self.max_index() > d {
            return Err(Error::Dimension(format!(
                "`{self}` references x{} but only {d} covariates are present",
                self.max_index()
            )));
        }
        Ok(())
    }

    /// Evaluates without index validation. Panics on an out-of-range index.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Coordinate(j) => x[j - 1],
            Self::Square(j) => x[j - 1] * x[j - 1],
            Self::Interaction(j, k) => x[j - 1] * x[k - 1],
            Self::Polynomial(e) => e
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0)
                .map(|(k, &p)| x[k].powi(p as i32))
                .product(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_dimension(x.len())?;
        Ok(self.eval_unchecked(x))
    }
}

impl fmt::Display for CovariateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant => write!(f, "1"),
            Self::Coordinate(j) => write!(f, "x{j}"),
            Self::Square(j) => write!(f, "x{j}^2"),
            Self::Interaction(j, k) => write!(f, "x{j}*x{k}"),
            Self::Polynomial(e) => {
                let factors: Vec<String> = e
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(k, &p)| if p == 1 { format!("x{}", k + 1) } else { format!("x{}^{p}", k + 1) })
                    .collect();
                if factors.is_empty() {
                    write!(f, "1")
                } else {
                    write!(f, "{}", factors.join("*"))
                }
            }
        }
    }
}

impl TryFrom<String> for CovariateFunction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CovariateFunction> for String {
    fn from(f: CovariateFunction) -> String {
        f.to_string()
    }
}

impl FromStr for CovariateFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let token = s.trim();
        let bad = |reason: &str| Error::Parse { token: token.to_string(), reason: reason.to_string() };
        if token.is_empty() {
            return Err(bad("empty token"));
        }
        if token == "1" {
            return Ok(Self::Constant);
        }
        let mut exponents: Vec<u32> = Vec::new();
        for factor in token.split('*') {
            let factor = factor.trim();
            let (base, power) = match factor.split_once('^') {
                Some((b, p)) => {
                    let p: u32 = p.trim().parse().map_err(|_| bad("exponent must be a positive integer"))?;
                    if p == 0 {
                        return Err(bad("exponent must be a positive integer"));
                    }
                    (b.trim(), p)
                }
                None => (factor, 1),
            };
            let index = base
                .strip_prefix('x')
                .ok_or_else(|| bad("expected `1`, `x<j>`, `x<j>^2` or `x<j>*x<k>`"))?;
            let j: usize = index.parse().map_err(|_| bad("covariate index must be a positive integer"))?;
            if j == 0 {
                return Err(bad("covariate indices are 1-based"));
            }
            if exponents.len() < j {
                exponents.resize(j, 0);
            }
            exponents[j - 1] += power;
        }
        Ok(Self::monomial(&exponents))
    }
}

/// Parses a comma-separated function list. An empty or blank string is an empty list.
pub fn parse_function_spec(text: &str) -> Result<Vec<CovariateFunction>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(str::parse).collect()
}

pub fn render_function_spec(fns: &[CovariateFunction]) -> String {
    fns.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn evaluate_functions(fns: &[CovariateFunction], x: &[f64]) -> Result<Vec<f64>> {
    fns.iter().map(|f| f.eval(x)).collect()
}

/// `n x |fns|` matrix whose row `i` is `fns` evaluated at unit `i`.
pub fn design_matrix(fns: &[CovariateFunction], sample: &ObservedSample) -> Result<DMatrix<f64>> {
    for f in fns {
        f.check_dimension(sample.d())?;
    }
    Ok(DMatrix::from_fn(sample.n(), fns.len(), |i, k| fns[k].eval_unchecked(sample.row(i))))
}

/// `x1, ..., xd`, optionally preceded by the constant.
pub fn linear_terms(d: usize, intercept: bool) -> Vec<CovariateFunction> {
    let constant = intercept.then_some(CovariateFunction::Constant);
    constant.into_iter().chain((1..=d).map(CovariateFunction::Coordinate)).collect()
}

/// Concatenates function lists, dropping later duplicates.
pub fn union_functions(blocks: &[&[CovariateFunction]]) -> Vec<CovariateFunction> {
    let mut out: Vec<CovariateFunction> = Vec::new();
    for f in blocks.iter().flat_map(|b| b.iter()) {
        if !out.contains(f) {
            out.push(f.clone());
        }
    }
    out
}

fn check_no_duplicates(block: &[CovariateFunction], name: &str) -> Result<()> {
    for (i, f) in block.iter().enumerate() {
        if block[..i].contains(f) {
            return Err(Error::InvalidSpec(format!("duplicate function `{f}` in {name}")));
        }
    }
    Ok(())
}

/// Two ordered blocks of balancing functions: `h1` is balanced between arms,
/// `h2` matches weighted treated units to unweighted controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    h1: Vec<CovariateFunction>,
    h2: Vec<CovariateFunction>,
}

impl BalanceSpec {
    pub fn new(h1: Vec<CovariateFunction>, h2: Vec<CovariateFunction>) -> Result<Self> {
        if h1.is_empty() {
            return Err(Error::InvalidSpec("h1 must contain at least one function".into()));
        }
        check_no_duplicates(&h1, "h1")?;
        check_no_duplicates(&h2, "h2")?;
        Ok(Self { h1, h2 })
    }

    pub fn parse(h1: &str, h2: &str) -> Result<Self> {
        Self::new(parse_function_spec(h1)?, parse_function_spec(h2)?)
    }

    pub fn h1(&self) -> &[CovariateFunction] {
        &self.h1
    }

    pub fn h2(&self) -> &[CovariateFunction] {
        &self.h2
    }

    pub fn m1(&self) -> usize {
        self.h1.len()
    }

    pub fn m2(&self) -> usize {
        self.h2.len()
    }

    pub fn m(&self) -> usize {
        self.m1() + self.m2()
    }

    /// `h1` followed by the members of `h2` not already in `h1`.
    pub fn union(&self) -> Vec<CovariateFunction> {
        union_functions(&[&self.h1, &self.h2])
    }

    pub fn check_dimension(&self, d: usize) -> Result<()> {
        self.h1.iter().chain(&self.h2).try_for_each(|f| f.check_dimension(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use CovariateFunction::*;

    #[test]
    fn parses_grammar_tokens() {
        assert_eq!(parse_function_spec("1,x2,x3").unwrap(), vec![Constant, Coordinate(2), Coordinate(3)]);
        assert_eq!(parse_function_spec("x1^2").unwrap(), vec![Square(1)]);
        assert_eq!(parse_function_spec("x1*x3,x2").unwrap(), vec![Interaction(1, 3), Coordinate(2)]);
        assert_eq!(parse_function_spec(" x3*x1 ").unwrap(), vec![Interaction(1, 3)]);
        assert!(parse_function_spec("").unwrap().is_empty());
    }

    #[test]
    fn malformed_token_is_named() {
        match parse_function_spec("1,z2,x3") {
            Err(Error::Parse { token, .. }) => assert_eq!(token, "z2"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_function_spec("x0").is_err());
        assert!(parse_function_spec("x1^").is_err());
        assert!(parse_function_spec("1,,x2").is_err());
    }

    #[test]
    fn out_of_range_index_deferred_to_evaluation() {
        let fns = parse_function_spec("x7").unwrap();
        assert!(matches!(evaluate_functions(&fns, &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn custom_polynomials() {
        let f: CovariateFunction = "x1^3*x2".parse().unwrap();
        assert_eq!(f, Polynomial(vec![3, 1]));
        assert_eq!(f.eval(&[2.0, 5.0]).unwrap(), 40.0);
        assert_eq!(f.to_string(), "x1^3*x2");
        assert_eq!("x2*x2".parse::<CovariateFunction>().unwrap(), Square(2));
    }

    #[test]
    fn evaluates_definitions() {
        assert_eq!(evaluate_functions(&[Constant, Coordinate(2)], &[3.0, 2.0, 5.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(evaluate_functions(&[Square(1)], &[-2.0, 7.0]).unwrap(), vec![4.0]);
        assert_eq!(evaluate_functions(&[Interaction(1, 3)], &[2.0, 0.0, 5.0]).unwrap(), vec![10.0]);
    }

    #[test]
    fn design_matrix_columns() {
        let s = ObservedSample::new(vec![vec![1.0], vec![2.0], vec![3.0]], vec![1, 0, 1], vec![0.0; 3]).unwrap();
        let ones = design_matrix(&[Constant], &s).unwrap();
        assert!(ones.iter().all(|&v| v == 1.0));
        let c = design_matrix(&[Coordinate(1)], &s).unwrap();
        assert_eq!(c.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);

        let s2 = ObservedSample::new(vec![vec![2.0], vec![3.0]], vec![1, 0], vec![0.0; 2]).unwrap();
        let m = design_matrix(&[Coordinate(1), Square(1)], &s2).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 3.0, 9.0]));
    }

    #[test]
    fn balance_spec_rejects_duplicates_and_empty_h1() {
        assert!(matches!(BalanceSpec::parse("1,x1,x1", "x2"), Err(Error::InvalidSpec(_))));
        assert!(matches!(BalanceSpec::parse("x1*x2,x2*x1", ""), Err(Error::InvalidSpec(_))));
        assert!(matches!(BalanceSpec::parse("", "x2"), Err(Error::InvalidSpec(_))));
        let spec = BalanceSpec::parse("1,x2,x3,x4", "x1").unwrap();
        assert_eq!((spec.m1(), spec.m2(), spec.m()), (4, 1, 5));
        assert_eq!(render_function_spec(&spec.union()), "1,x2,x3,x4,x1");
    }

    #[test]
    fn sample_validation() {
        let rows = vec![vec![0.0], vec![1.0]];
        assert!(ObservedSample::new(rows.clone(), vec![1, 2], vec![0.0, 0.0]).is_err());
        assert!(ObservedSample::new(rows.clone(), vec![1, 1], vec![0.0, 0.0]).is_err());
        assert!(ObservedSample::new(rows.clone(), vec![1, 0], vec![f64::NAN, 0.0]).is_err());
        assert!(ObservedSample::new(vec![vec![0.0]], vec![1], vec![0.0]).is_err());
        assert!(ObservedSample::new(rows, vec![1, 0], vec![0.0, 1.0]).is_ok());
    }
}
