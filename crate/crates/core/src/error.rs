use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A token of the covariate-function grammar could not be parsed.
    #[error("cannot parse covariate function token `{token}`: {reason}")]
    Parse { token: String, reason: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid balance specification: {0}")]
    InvalidSpec(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An iterative fit stopped without meeting its convergence criterion.
    #[error(
        "{method} did not converge after {iterations} iterations (criterion norm {criterion_norm:.3e})"
    )]
    NonConvergence {
        method: String,
        iterations: usize,
        criterion_norm: f64,
        best_beta: Vec<f64>,
    },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),
}
