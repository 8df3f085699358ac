//! Simulation designs, the Monte Carlo harness and the bias oracle.

pub mod dgp;
pub mod monte_carlo;
pub mod oracle;

pub use dgp::{draw_replication, replication_rng, DgpSpec, Draw, OutcomeForm, PropensityForm, Scenario, X1Spread};
pub use monte_carlo::{
    format_sig, run_monte_carlo, run_monte_carlo_with, run_replication, EstimatorSummary, McOptions, McSummary,
    RepEstimate, WorkingModels,
};
pub use oracle::{bias_oracle_b, make_optimal_f, optimal_f, OracleEstimate, OracleWeighting};
