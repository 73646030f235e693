//! Reluctant transfer learning for individualized treatment rules.
//!
//! A source model's coefficients are carried over to a small target sample
//! and only the coefficient shifts the target data supports are admitted,
//! through a weighted lasso on the source-adjusted pseudo-outcome.

pub mod baselines;
pub mod data;
pub mod design;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod metrics;
pub mod penalized;
pub mod simulation;

pub use design::{CoefficientLayout, FeatureMap, TreatmentCoding};
pub use error::{Result, RtlError};
pub use estimator::{fit_rtl, Policy, RtlModel, SourceModel};
pub use penalized::{fit_weighted_lasso, PenalizedFit, PenaltySpec};

pub use ndarray;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
