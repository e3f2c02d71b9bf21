use rand::seq::SliceRandom;

use crate::data::{AreaSample, SurveySample};
use crate::error::Result;
use crate::linalg::linpred;
use crate::ner::{fit_ner_mle, NerOptions};
use crate::rng::RngStream;

/// Shadow population built from a real survey: every unit keeps its
/// covariates and receives `fitted + residual`, with the NER residuals
/// randomly permuted within each area.
pub fn shadow_population(survey: &SurveySample, opts: &NerOptions, stream: RngStream) -> Result<SurveySample> {
    let fit = fit_ner_mle(survey, None, opts)?;
    let areas = survey
        .areas()
        .iter()
        .enumerate()
        .map(|(k, area)| {
            let fitted: Vec<f64> = area.rows().map(|x| linpred(&fit.beta, x, fit.intercept) + fit.nu[k]).collect();
            let mut resid: Vec<f64> = area.y().iter().zip(&fitted).map(|(y, f)| y - f).collect();
            resid.shuffle(&mut stream.child(k as u64).rng());
            let y = fitted.iter().zip(&resid).map(|(f, e)| f + e).collect();
            AreaSample::from_flat(area.area_id(), area.d(), area.x_flat().to_vec(), y)
        })
        .collect::<Result<Vec<_>>>()?;
    SurveySample::new(areas)
}
