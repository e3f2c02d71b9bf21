use serde::{Deserialize, Serialize};

use super::DrmFit;
use crate::data::{CensusArea, CensusFrame, SurveySample};
use crate::error::{Error, Result};
use crate::linalg::{contrast, linpred};
use crate::ner::NerFit;
use crate::quantile::{CdfBuilder, CdfEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EbelVariant {
    /// Observed indicators for sampled units, shifted `G_k` for the rest.
    Ebel1,
    /// Shifted `G_k` for every census unit.
    Ebel2,
}

/// EL predictor: `n_k^-1 sum_j G_k(y - (x_kj - xbar_k)' beta_ls - eblup_k)`,
/// centred on the NER EBLUP mean.
pub fn cdf_el(drm: &DrmFit, ner: &NerFit, sample: &SurveySample, area: &str) -> Result<CdfEstimate> {
    let k = drm.area_index(area)?;
    cdf_el_at(drm, ner, sample, k)
}

pub(crate) fn cdf_el_at(drm: &DrmFit, ner: &NerFit, sample: &SurveySample, k: usize) -> Result<CdfEstimate> {
    if drm.area_ids != ner.area_ids {
        return Err(Error::Validation("NER and DRM fits cover different areas".into()));
    }
    let a = sample.area(k);
    if a.area_id() != drm.area_ids[k] {
        return Err(Error::Validation(format!("area {} does not match the fits", a.area_id())));
    }
    let xbar = &drm.xbar[k];
    let target = ner.eblup_mean[k];
    let shifts = a.rows().map(|x| contrast(&drm.beta_ls, x, xbar, false) + target).collect();
    CdfBuilder::new()
        .shifted(drm.gk_at(k).step_base(), shifts, a.n() as f64)
        .build()
}

/// Census-based EBEL predictors.
pub fn cdf_ebel(drm: &DrmFit, sample: &SurveySample, census: &CensusFrame, area: &str, variant: EbelVariant) -> Result<CdfEstimate> {
    let k = drm.area_index(area)?;
    let c = census
        .area(area)
        .ok_or_else(|| Error::Config(format!("area {area} missing from census")))?;
    cdf_ebel_at(drm, sample, c, k, variant)
}

pub(crate) fn cdf_ebel_at(drm: &DrmFit, sample: &SurveySample, census: &CensusArea, k: usize, variant: EbelVariant) -> Result<CdfEstimate> {
    let a = sample.area(k);
    if a.area_id() != drm.area_ids[k] {
        return Err(Error::Validation(format!("area {} does not match the DRM fit", a.area_id())));
    }
    let x = census.x_flat().ok_or_else(|| {
        Error::Config(format!("area {}: EBEL predictors need unit-level census covariates", a.area_id()))
    })?;
    let mask = match variant {
        EbelVariant::Ebel1 => {
            if census.sample_link().is_none() {
                return Err(Error::Config(format!(
                    "area {}: EBEL1 needs the census sample link to identify sampled units",
                    a.area_id()
                )));
            }
            census.sampled_mask()
        }
        EbelVariant::Ebel2 => vec![false; census.size()],
    };
    let big_n = census.size() as f64;
    let nu = drm.nu_hat[k];
    let shifts: Vec<f64> = x
        .chunks_exact(census.d())
        .zip(&mask)
        .filter(|(_, &s)| !s)
        .map(|(row, _)| nu + linpred(&drm.beta_ls, row, false))
        .collect();
    let mut b = CdfBuilder::new().shifted(drm.gk_at(k).step_base(), shifts, big_n);
    if variant == EbelVariant::Ebel1 {
        b = b.atoms_uniform(a.y().to_vec(), big_n);
    }
    b.build()
}
