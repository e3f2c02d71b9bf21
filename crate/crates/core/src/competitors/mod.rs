//! Comparison predictors: direct sample quantiles, the Molina-Rao empirical
//! best predictor and the M-quantile predictor.

mod mq;
mod mr;

pub use mq::{cdf_mq, fit_mq, MqFit, MqOptions, MQ_GRID_SIZE};
pub use mr::{cdf_mr, DEFAULT_MC_DRAWS};
pub(crate) use mq::cdf_mq_at;
pub(crate) use mr::cdf_mr_at;

use crate::data::SurveySample;
use crate::error::{Error, Result};
use crate::quantile::CdfEstimate;

/// `inf { y : ecdf_k(y) >= alpha }` over the area's sampled responses.
pub fn quantile_direct(sample: &SurveySample, area: &str, alpha: f64) -> Result<f64> {
    let k = sample
        .area_index(area)
        .ok_or_else(|| Error::Validation(format!("area {area} not in sample")))?;
    CdfEstimate::empirical(sample.area(k).y())?.invert(alpha)
}
