//! CDF representation, quantile inversion and accuracy metrics.

mod cdf;
mod metrics;
mod table;

pub use cdf::{CdfBuilder, CdfEstimate, CdfKind, StepBase};
pub use metrics::{amse, trimmed_ratio};
pub use table::{parse_alphas, QuantileTable, DEFAULT_ALPHAS};
pub(crate) use table::validate_alphas;

/// Free-function form of [`CdfEstimate::invert`].
pub fn invert(cdf: &CdfEstimate, alpha: f64) -> crate::Result<f64> {
    cdf.invert(alpha)
}
