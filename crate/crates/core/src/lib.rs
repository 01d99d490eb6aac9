//! Gaussian-process models for aggregated substation load curves.
//!
//! Loads of a substation are modelled as the market-weighted sum of per-type
//! typical curves plus a Gaussian process whose covariance aggregates the
//! per-type kernels. Substations can further be clustered with a mixture of
//! such models.

pub mod basis;
pub mod clustering;
pub mod covariance;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod optim;
pub mod simulate;
#[cfg(test)]
mod testutil;

pub use basis::{fit_interpolating_spline, InterpolatingSpline, KnotVector, TensorBasisSpec};
pub use clustering::{fit_mixture, MixtureConfig, MixtureFitResult, MixtureState};
pub use covariance::{CovarianceKind, CovarianceParams, CovarianceSpec, TimeGrid};
pub use data::{Covariate, CovariateValues, LoadPanel, MarketTable};
pub use error::{Error, Result};
pub use model::{fit, FitResult, MeanBasis, ModelConfig};
pub use simulate::{Scenario, ScenarioSpec};
