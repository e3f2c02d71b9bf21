//! Small-area quantile estimation.
//!
//! The crate fits the nested-error regression (NER) model and a density ratio
//! model (DRM) for the unit-level errors, turns either fit into per-area CDF
//! predictors, inverts those into quantiles, estimates their mean squared
//! error by a parametric bootstrap, and ships a simulation bench that
//! regenerates synthetic finite populations to score every predictor.
//!
//! Module map:
//! - [`data`]: survey and census types, CSV ingestion.
//! - [`ner`]: maximum-likelihood NER fit, EBLUP means, normal-theory CDFs.
//! - [`drm`]: centralized residuals, dual empirical likelihood, EL/EBEL CDFs.
//! - [`competitors`]: direct, Molina-Rao EBP and M-quantile predictors.
//! - [`quantile`]: CDF representation, inversion, AMSE and MSE ratios.
//! - [`pipeline`]: one entry point that runs any predictor on a sample.
//! - [`bootstrap`]: parametric bootstrap MSE.
//! - [`sim`]: population generators and the repeated-sampling experiment.

pub mod bootstrap;
pub mod competitors;
pub mod data;
pub mod drm;
pub mod error;
mod linalg;
pub mod ner;
pub mod pipeline;
pub mod quantile;
pub mod rng;
pub mod sim;
mod special;

pub use error::{Error, Result};
pub use special::normal_cdf;

/// Formats a float with 17 significant digits, enough to round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
