pub mod design;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod inference;
pub mod propensity;
pub mod simulation;

pub use error::{Error, Result};
