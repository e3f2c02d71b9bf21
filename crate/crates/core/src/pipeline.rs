//! Runs any of the quantile predictors on a survey sample.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::competitors::{cdf_mq_at, cdf_mr_at, fit_mq, MqFit, MqOptions, DEFAULT_MC_DRAWS};
use crate::data::{CensusArea, CensusFrame, SurveySample};
use crate::drm::{cdf_ebel_at, cdf_el_at, fit_drm_sample, DrmFit, DrmOptions, EbelVariant};
use crate::error::{Error, Result};
use crate::ner::{cdf_eb_at, cdf_ner_at, fit_ner_mle, EbVariant, NerFit, NerOptions, XbarSource};
use crate::quantile::{CdfEstimate, QuantileTable};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Area sample quantiles.
    Dir,
    /// Normal-theory CDF centred on the EBLUP.
    Ner,
    Eb1,
    Eb2,
    /// DRM error distribution centred on the EBLUP.
    El,
    Ebel1,
    Ebel2,
    /// Molina-Rao Monte-Carlo EBP.
    Mr,
    /// M-quantile predictor.
    Mq,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Dir,
        Method::Ner,
        Method::Eb1,
        Method::Eb2,
        Method::El,
        Method::Ebel1,
        Method::Ebel2,
        Method::Mr,
        Method::Mq,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Dir => "dir",
            Method::Ner => "ner",
            Method::Eb1 => "eb1",
            Method::Eb2 => "eb2",
            Method::El => "el",
            Method::Ebel1 => "ebel1",
            Method::Ebel2 => "ebel2",
            Method::Mr => "mr",
            Method::Mq => "mq",
        }
    }

    /// Needs unit-level census covariates.
    pub fn needs_census(self) -> bool {
        matches!(self, Method::Eb1 | Method::Eb2 | Method::Ebel1 | Method::Ebel2 | Method::Mr | Method::Mq)
    }

    /// Needs to know which census rows were sampled.
    pub fn needs_link(self) -> bool {
        matches!(self, Method::Eb1 | Method::Ebel1 | Method::Mr | Method::Mq)
    }

    pub fn needs_ner(self) -> bool {
        matches!(self, Method::Ner | Method::Eb1 | Method::Eb2 | Method::El | Method::Mr)
    }

    pub fn needs_drm(self) -> bool {
        matches!(self, Method::El | Method::Ebel1 | Method::Ebel2)
    }

    pub fn needs_mq(self) -> bool {
        self == Method::Mq
    }

    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for t in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let m: Method = t.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let alias = match t.as_str() {
            "eb" => Some(Method::Eb2),
            "ebel" => Some(Method::Ebel2),
            _ => None,
        };
        alias
            .or_else(|| Method::ALL.into_iter().find(|m| m.tag() == t))
            .ok_or_else(|| Error::Config(format!("unknown method tag '{s}'")))
    }
}

/// Model options shared by all predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictSettings {
    pub ner: NerOptions,
    pub drm: DrmOptions,
    pub mq: MqOptions,
    /// Monte-Carlo draws per out-of-sample unit for MR.
    pub mr_draws: usize,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self { ner: NerOptions::default(), drm: DrmOptions::default(), mq: MqOptions::default(), mr_draws: DEFAULT_MC_DRAWS }
    }
}

/// Model fits needed by a set of methods.
#[derive(Debug, Clone, Default)]
pub struct Fits {
    pub ner: Option<NerFit>,
    pub drm: Option<DrmFit>,
    pub mq: Option<MqFit>,
}

/// Rejects method/census combinations that cannot work, before any fitting.
pub fn check_requirements(methods: &[Method], census: Option<&CensusFrame>) -> Result<()> {
    for &m in methods {
        if m.needs_census() {
            let Some(c) = census else {
                return Err(Error::Config(format!("method {m} needs a census file")));
            };
            if !c.is_full() {
                return Err(Error::Config(format!("method {m} needs unit-level census covariates, not area means")));
            }
            if m.needs_link() && !c.has_sample_link() {
                return Err(Error::Config(format!("method {m} needs the census sampled-unit flags")));
            }
        }
    }
    Ok(())
}

/// Fits every model the methods rely on. `warm_drm` seeds the DRM optimizer.
pub fn fit_models(
    sample: &SurveySample,
    census: Option<&CensusFrame>,
    methods: &[Method],
    settings: &PredictSettings,
    warm_drm: Option<&DrmFit>,
) -> Result<Fits> {
    check_requirements(methods, census)?;
    let mut fits = Fits::default();
    if methods.iter().any(|m| m.needs_ner()) {
        let ner = fit_ner_mle(sample, census, &settings.ner)?;
        if ner.xbar_source == XbarSource::SampleMeans {
            log::warn!("no census supplied: EBLUP uses sample covariate means");
        }
        fits.ner = Some(ner);
    }
    if methods.iter().any(|m| m.needs_drm()) {
        fits.drm = Some(fit_drm_sample(sample, &settings.drm, warm_drm)?);
    }
    if methods.iter().any(|m| m.needs_mq()) {
        fits.mq = Some(fit_mq(sample, &settings.mq)?);
    }
    Ok(fits)
}

fn missing(what: &str) -> Error {
    Error::Config(format!("{what} fit is required but was not computed"))
}

/// CDF predictor of area `k` (sample order). Returns `None` for the direct
/// predictor, which inverts the sample ECDF directly.
pub fn area_cdf(
    method: Method,
    sample: &SurveySample,
    census: Option<&[&CensusArea]>,
    fits: &Fits,
    k: usize,
    settings: &PredictSettings,
    stream: RngStream,
) -> Result<CdfEstimate> {
    let census_area = || -> Result<&CensusArea> {
        census
            .map(|c| c[k])
            .ok_or_else(|| Error::Config(format!("method {method} needs a census file")))
    };
    let ner = || fits.ner.as_ref().ok_or_else(|| missing("NER"));
    let drm = || fits.drm.as_ref().ok_or_else(|| missing("DRM"));
    match method {
        Method::Dir => CdfEstimate::empirical(sample.area(k).y()),
        Method::Ner => cdf_ner_at(ner()?, sample, k),
        Method::Eb1 => cdf_eb_at(ner()?, sample, census_area()?, k, EbVariant::Eb1),
        Method::Eb2 => cdf_eb_at(ner()?, sample, census_area()?, k, EbVariant::Eb2),
        Method::El => cdf_el_at(drm()?, ner()?, sample, k),
        Method::Ebel1 => cdf_ebel_at(drm()?, sample, census_area()?, k, EbelVariant::Ebel1),
        Method::Ebel2 => cdf_ebel_at(drm()?, sample, census_area()?, k, EbelVariant::Ebel2),
        Method::Mr => cdf_mr_at(ner()?, sample, census_area()?, k, settings.mr_draws, stream.child(k as u64)),
        Method::Mq => cdf_mq_at(fits.mq.as_ref().ok_or_else(|| missing("M-quantile"))?, sample, census_area()?, k),
    }
}

/// Quantile table of one method for every sample area.
pub fn predict_quantiles(
    method: Method,
    sample: &SurveySample,
    census: Option<&CensusFrame>,
    fits: &Fits,
    alphas: &[f64],
    settings: &PredictSettings,
    stream: RngStream,
) -> Result<QuantileTable> {
    crate::quantile::validate_alphas(alphas)?;
    check_requirements(&[method], census)?;
    let aligned = match census {
        Some(c) if method.needs_census() => Some(c.aligned(sample)?),
        _ => None,
    };
    let values = (0..sample.num_areas())
        .map(|k| area_cdf(method, sample, aligned.as_deref(), fits, k, settings, stream)?.invert_many(alphas))
        .collect::<Result<Vec<_>>>()?;
    QuantileTable::new(method.tag(), sample.area_ids(), alphas.to_vec(), values)
}

/// Fits the needed models once and predicts every method.
pub fn predict_all(
    methods: &[Method],
    sample: &SurveySample,
    census: Option<&CensusFrame>,
    alphas: &[f64],
    settings: &PredictSettings,
    stream: RngStream,
    warm_drm: Option<&DrmFit>,
) -> Result<(Fits, Vec<QuantileTable>)> {
    let fits = fit_models(sample, census, methods, settings, warm_drm)?;
    let tables = methods
        .iter()
        .map(|&m| predict_quantiles(m, sample, census, &fits, alphas, settings, stream))
        .collect::<Result<Vec<_>>>()?;
    Ok((fits, tables))
}
