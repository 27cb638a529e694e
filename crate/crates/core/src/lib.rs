//! Locally sparse varying-coefficient mixed models.
//!
//! Time-varying regression effects `beta_j(t)` are estimated on a grid by
//! kernel-weighted generalized estimating equations with a parametric
//! working covariance, and made locally and globally sparse by an adaptive
//! sparse group Lasso solved with proximal gradient steps. Tuning uses an
//! extended BIC; uncertainty comes from a cluster bootstrap with sup-t
//! simultaneous bands.

pub mod covariance;
pub mod estimator;
pub mod inference;
pub mod io;
pub mod error;
pub mod kernel;
pub mod model;
pub mod penalty;
pub mod selection;
pub mod simulation;
pub mod transform;

pub use covariance::{CovarianceFamily, VarianceParams};
pub use error::{Error, Result};
pub use kernel::KernelConfig;
pub use model::{CoefficientMatrix, LongitudinalDataset, SubjectRecord, TimeGrid};
pub use penalty::PenaltyConfig;
