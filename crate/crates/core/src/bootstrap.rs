//! Parametric bootstrap estimation of the MSE of quantile predictors.
//!
//! Each replicate builds a bootstrap population from the fitted model, takes
//! the replicate sample at the original sampled positions, reruns the
//! predictors on it (refitting every model) and compares their quantiles
//! with the replicate population's own quantiles.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaSample, CensusFrame, SurveySample};
use crate::drm::{DrmFit, GkSampler};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::linalg::linpred;
use crate::ner::NerFit;
use crate::pipeline::{predict_all, Method, PredictSettings};
use crate::quantile::{validate_alphas, CdfEstimate};
use crate::rng::RngStream;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Census populations with errors drawn from the fitted `G_k`.
    CensusDrm,
    /// Census populations with normal errors.
    CensusNer,
    /// Sampled units only, errors from `G_k`; the MSE is the variance of the
    /// prediction errors.
    NocensusDrm,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::CensusDrm => "census-drm",
            Variant::CensusNer => "census-ner",
            Variant::NocensusDrm => "nocensus-drm",
        }
    }

    pub fn uses_census(self) -> bool {
        self != Variant::NocensusDrm
    }

    pub fn uses_drm(self) -> bool {
        self != Variant::CensusNer
    }

    /// Variant matching a predictor's own model assumptions.
    pub fn natural_for(method: Method, census: bool) -> Variant {
        match method {
            Method::Ner | Method::Eb1 | Method::Eb2 | Method::Mr if census => Variant::CensusNer,
            _ if census => Variant::CensusDrm,
            _ => Variant::NocensusDrm,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::CensusDrm, Variant::CensusNer, Variant::NocensusDrm]
            .into_iter()
            .find(|v| v.tag() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown bootstrap variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub variant: Variant,
    pub alphas: Vec<f64>,
    pub stream: RngStream,
}

impl BootstrapPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("bootstrap needs B >= 2, got {}", self.replicates)));
        }
        validate_alphas(&self.alphas)
    }
}

/// One bootstrap world: the replicate sample, its census (shared with the
/// original) and the replicate population quantiles per (area, alpha).
pub struct Replicate<'a> {
    pub index: usize,
    pub sample: SurveySample,
    pub census: Option<&'a CensusFrame>,
    pub truth: Vec<Vec<f64>>,
    /// Sampled positions used for each area's replicate sample.
    pub positions: Vec<Vec<usize>>,
}

/// Anything that maps a replicate sample to quantile predictions.
pub trait QuantilePredictor: Sync {
    fn labels(&self) -> Vec<String>;
    /// One `area x alpha` table per label.
    fn predict(&self, rep: &Replicate<'_>, alphas: &[f64], stream: RngStream) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// Runs a fixed list of methods, refitting every model on each replicate.
pub struct MethodPredictor {
    methods: Vec<Method>,
    settings: PredictSettings,
    warm_drm: Option<DrmFit>,
    /// Bit pattern of the largest DRM constraint residual seen so far.
    max_violation: AtomicU64,
}

impl MethodPredictor {
    /// `warm_drm` is the starting point for the DRM refits.
    pub fn new(methods: Vec<Method>, settings: PredictSettings, warm_drm: Option<DrmFit>) -> Self {
        Self { methods, settings, warm_drm, max_violation: AtomicU64::new(0) }
    }

    /// Largest `|sum_i p_i exp(theta_r'q_i) - 1|` over all DRM refits so far.
    pub fn max_constraint_violation(&self) -> f64 {
        f64::from_bits(self.max_violation.load(Ordering::Relaxed))
    }
}

impl QuantilePredictor for MethodPredictor {
    fn labels(&self) -> Vec<String> {
        self.methods.iter().map(|m| m.tag().to_owned()).collect()
    }

    fn predict(&self, rep: &Replicate<'_>, alphas: &[f64], stream: RngStream) -> Result<Vec<Vec<Vec<f64>>>> {
        let (fits, tables) = predict_all(&self.methods, &rep.sample, rep.census, alphas, &self.settings, stream, self.warm_drm.as_ref())?;
        if let Some(d) = &fits.drm {
            // Non-negative floats order the same way as their bit patterns.
            self.max_violation.fetch_max(d.max_constraint_violation().to_bits(), Ordering::Relaxed);
        }
        Ok(tables.into_iter().map(|t| t.values).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub variant: Variant,
    pub labels: Vec<String>,
    pub area_ids: Vec<String>,
    pub alphas: Vec<f64>,
    /// `mse[label][area][alpha]`.
    pub mse: Vec<Vec<Vec<f64>>>,
    pub replicates: usize,
    /// Replicates excluded because a fit failed.
    pub failures: usize,
    pub failure_messages: Vec<String>,
}

impl MseReport {
    pub fn table(&self, label: &str) -> Option<&Vec<Vec<f64>>> {
        self.labels.iter().position(|l| l == label).map(|i| &self.mse[i])
    }

    /// Writes `area_id, alpha, mse, failures`, with a leading `method`
    /// column when the report holds more than one predictor.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let many = self.labels.len() > 1;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header = vec!["area_id", "alpha", "mse", "failures"];
        if many {
            header.insert(0, "method");
        }
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        let failures = self.failures.to_string();
        for (l, label) in self.labels.iter().enumerate() {
            for (k, id) in self.area_ids.iter().enumerate() {
                for (a, alpha) in self.alphas.iter().enumerate() {
                    let mut rec = vec![id.clone(), alpha.to_string(), fmt_f64(self.mse[l][k][a]), failures.clone()];
                    if many {
                        rec.insert(0, label.clone());
                    }
                    w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Inputs the bootstrap populations are generated from.
pub struct BootstrapInputs<'a> {
    pub sample: &'a SurveySample,
    pub census: Option<&'a CensusFrame>,
    pub ner: &'a NerFit,
    pub drm: Option<&'a DrmFit>,
}

/// Population quantiles with the same inf convention as the predictors.
pub fn population_quantiles(y: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
    CdfEstimate::empirical(y)?.invert_many(alphas)
}

struct ErrorSource {
    samplers: Option<Vec<GkSampler>>,
    sd: f64,
}

impl ErrorSource {
    fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> f64 {
        match &self.samplers {
            Some(s) => s[k].draw(rng),
            None => {
                let z: f64 = StandardNormal.sample(rng);
                self.sd * z
            }
        }
    }
}

/// Builds replicate `b`'s population, sample and truth.
pub fn build_replicate<'a>(
    inputs: &BootstrapInputs<'a>,
    variant: Variant,
    alphas: &[f64],
    b: usize,
    stream: RngStream,
) -> Result<Replicate<'a>> {
    let ctx = Context::new(inputs, variant)?;
    ctx.replicate(b, alphas, stream)
}

struct Context<'a, 'b> {
    inputs: &'b BootstrapInputs<'a>,
    variant: Variant,
    errors: ErrorSource,
    beta: Vec<f64>,
    intercept: bool,
    nu_dist: Option<Normal<f64>>,
    census_rows: Option<Vec<&'a crate::data::CensusArea>>,
}

impl<'a, 'b> Context<'a, 'b> {
    fn new(inputs: &'b BootstrapInputs<'a>, variant: Variant) -> Result<Self> {
        let census_rows = if variant.uses_census() {
            let c = inputs
                .census
                .ok_or_else(|| Error::Config(format!("bootstrap variant {variant} needs a census")))?;
            if !c.is_full() || !c.has_sample_link() {
                return Err(Error::Config(format!(
                    "bootstrap variant {variant} needs unit-level census covariates with sampled-unit flags"
                )));
            }
            Some(c.aligned(inputs.sample)?)
        } else {
            None
        };
        let (errors, beta, intercept) = if variant.uses_drm() {
            let drm = inputs
                .drm
                .ok_or_else(|| Error::Config(format!("bootstrap variant {variant} needs a DRM fit")))?;
            let samplers = (0..drm.num_areas()).map(|k| GkSampler::new(&drm.gk_at(k))).collect::<Result<Vec<_>>>()?;
            (ErrorSource { samplers: Some(samplers), sd: 0.0 }, drm.beta_ls.clone(), false)
        } else {
            let ner = inputs.ner;
            if !(ner.sigma_e2 > 0.0) {
                return Err(Error::Degenerate("normal bootstrap errors need sigma_e2 > 0".into()));
            }
            (ErrorSource { samplers: None, sd: ner.sigma_e() }, ner.beta.clone(), ner.intercept)
        };
        let sv = inputs.ner.sigma_v2;
        let nu_dist = if sv > 0.0 { Some(Normal::new(0.0, sv.sqrt()).map_err(|e| Error::Degenerate(e.to_string()))?) } else { None };
        Ok(Self { inputs, variant, errors, beta, intercept, nu_dist, census_rows })
    }

    fn replicate(&self, b: usize, alphas: &[f64], stream: RngStream) -> Result<Replicate<'a>> {
        let mut rng = stream.rng();
        let sample = self.inputs.sample;
        let mut areas = Vec::with_capacity(sample.num_areas());
        let mut truth = Vec::with_capacity(sample.num_areas());
        let mut positions = Vec::with_capacity(sample.num_areas());
        for (k, area) in sample.areas().iter().enumerate() {
            let nu = self.nu_dist.map_or(0.0, |d| d.sample(&mut rng));
            match &self.census_rows {
                Some(rows) => {
                    let c = rows[k];
                    let x = c.x_flat().expect("checked full");
                    let y: Vec<f64> = x
                        .chunks_exact(c.d())
                        .map(|row| linpred(&self.beta, row, self.intercept) + nu + self.errors.draw(k, &mut rng))
                        .collect();
                    let link = c.sample_link().expect("checked link").to_vec();
                    let ys: Vec<f64> = link.iter().map(|&i| y[i]).collect();
                    let xs: Vec<f64> = link.iter().flat_map(|&i| c.row(i).expect("full").iter().copied()).collect();
                    areas.push(AreaSample::from_flat(area.area_id(), c.d(), xs, ys)?);
                    truth.push(population_quantiles(&y, alphas)?);
                    positions.push(link);
                }
                None => {
                    let y: Vec<f64> = area
                        .rows()
                        .map(|row| linpred(&self.beta, row, self.intercept) + nu + self.errors.draw(k, &mut rng))
                        .collect();
                    truth.push(population_quantiles(&y, alphas)?);
                    areas.push(AreaSample::from_flat(area.area_id(), area.d(), area.x_flat().to_vec(), y)?);
                    positions.push((0..area.n()).collect());
                }
            }
        }
        let census = if self.variant.uses_census() { self.inputs.census } else { None };
        Ok(Replicate { index: b, sample: SurveySample::new(areas)?, census, truth, positions })
    }
}

/// Bootstrap MSE of every predictor label, per (area, alpha).
pub fn bootstrap_mse(plan: &BootstrapPlan, inputs: &BootstrapInputs<'_>, predictor: &dyn QuantilePredictor) -> Result<MseReport> {
    plan.validate()?;
    let ctx = Context::new(inputs, plan.variant)?;
    let labels = predictor.labels();
    let alphas = &plan.alphas;
    let outcomes: Vec<Result<Vec<Vec<Vec<f64>>>>> = (0..plan.replicates)
        .into_par_iter()
        .map(|b| {
            let stream = plan.stream.child(b as u64);
            let rep = ctx.replicate(b, alphas, stream.child(0))?;
            let preds = predictor.predict(&rep, alphas, stream.child(1))?;
            if preds.len() != labels.len() {
                return Err(Error::Dimension("predictor returned the wrong number of tables".into()));
            }
            // Prediction error per (label, area, alpha).
            Ok(preds
                .into_iter()
                .map(|t| t.iter().zip(&rep.truth).map(|(p, tr)| p.iter().zip(tr).map(|(a, b)| a - b).collect()).collect())
                .collect())
        })
        .collect();

    let mut diffs = Vec::with_capacity(outcomes.len());
    let mut messages = Vec::new();
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(d) => diffs.push(d),
            Err(e) => messages.push(format!("replicate {b}: {e}")),
        }
    }
    let failures = messages.len();
    if failures as f64 > MAX_FAILURE_SHARE * plan.replicates as f64 {
        return Err(Error::NonConvergence {
            what: "bootstrap replicates",
            iterations: plan.replicates,
            detail: format!("{failures} of {} replicates failed", plan.replicates),
            trace: messages,
        });
    }
    if failures > 0 {
        log::warn!("bootstrap: {failures} of {} replicates failed and were excluded", plan.replicates);
    }
    let used = diffs.len();
    if used < 2 {
        return Err(Error::Degenerate("fewer than two usable bootstrap replicates".into()));
    }
    let m = inputs.sample.num_areas();
    let mse = (0..labels.len())
        .map(|l| {
            (0..m)
                .map(|k| {
                    (0..alphas.len())
                        .map(|a| {
                            let vals = diffs.iter().map(|d: &Vec<Vec<Vec<f64>>>| d[l][k][a]);
                            match plan.variant {
                                Variant::NocensusDrm => {
                                    let mean = vals.clone().sum::<f64>() / used as f64;
                                    vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (used - 1) as f64
                                }
                                _ => vals.map(|v| v * v).sum::<f64>() / used as f64,
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(MseReport {
        variant: plan.variant,
        labels,
        area_ids: inputs.sample.area_ids(),
        alphas: alphas.clone(),
        mse,
        replicates: plan.replicates,
        failures,
        failure_messages: messages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CensusArea;
    use crate::drm::{fit_drm_sample, DrmOptions};
    use crate::ner::{fit_ner_mle, NerOptions};
    use rand_distr::Uniform;

    struct Fixture {
        sample: SurveySample,
        census: CensusFrame,
    }

    fn fixture(m: usize, big_n: usize, n: usize, seed: u64) -> Fixture {
        let mut rng = RngStream::new(seed, 0).rng();
        let u = Uniform::new(0.0, 10.0).unwrap();
        let mut areas = Vec::new();
        let mut cens = Vec::new();
        for k in 0..m {
            let x: Vec<f64> = (0..big_n).map(|_| u.sample(&mut rng)).collect();
            let nu: f64 = StandardNormal.sample(&mut rng);
            let y: Vec<f64> = x
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    1.0 + 0.5 * v + nu + e
                })
                .collect();
            let link: Vec<usize> = (0..n).map(|i| (i * 7 + k) % big_n).collect();
            let xs = link.iter().map(|&i| x[i]).collect();
            let ys = link.iter().map(|&i| y[i]).collect();
            let id = format!("area{k}");
            areas.push(AreaSample::from_flat(id.clone(), 1, xs, ys).unwrap());
            cens.push(CensusArea::full(id, 1, x, Some(link)).unwrap());
        }
        Fixture { sample: SurveySample::new(areas).unwrap(), census: CensusFrame::new(cens).unwrap() }
    }

    struct Oracle;

    impl QuantilePredictor for Oracle {
        fn labels(&self) -> Vec<String> {
            vec!["oracle".into()]
        }
        fn predict(&self, rep: &Replicate<'_>, _: &[f64], _: RngStream) -> Result<Vec<Vec<Vec<f64>>>> {
            Ok(vec![rep.truth.clone()])
        }
    }

    fn fits(f: &Fixture) -> (NerFit, DrmFit) {
        (
            fit_ner_mle(&f.sample, Some(&f.census), &NerOptions::default()).unwrap(),
            fit_drm_sample(&f.sample, &DrmOptions::default(), None).unwrap(),
        )
    }

    fn plan(b: usize, variant: Variant, seed: u64) -> BootstrapPlan {
        BootstrapPlan { replicates: b, variant, alphas: vec![0.25, 0.5, 0.75], stream: RngStream::new(seed, 0) }
    }

    #[test]
    fn oracle_predictor_has_zero_mse() {
        let f = fixture(4, 60, 12, 1);
        let (ner, drm) = fits(&f);
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        for v in [Variant::CensusDrm, Variant::CensusNer] {
            let r = bootstrap_mse(&plan(10, v, 3), &inputs, &Oracle).unwrap();
            assert!(r.mse[0].iter().flatten().all(|&m| m == 0.0));
            assert_eq!(r.failures, 0);
        }
    }

    #[test]
    fn replicate_sample_follows_the_link() {
        let f = fixture(3, 40, 8, 2);
        let (ner, drm) = fits(&f);
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        for v in [Variant::CensusDrm, Variant::NocensusDrm] {
            let rep = build_replicate(&inputs, v, &[0.5], 0, RngStream::new(1, 1)).unwrap();
            for (k, area) in rep.sample.areas().iter().enumerate() {
                assert_eq!(area.area_id(), f.sample.area(k).area_id());
                assert_eq!(area.x_flat(), f.sample.area(k).x_flat());
                assert_eq!(area.n(), rep.positions[k].len());
            }
            if v == Variant::CensusDrm {
                for (k, c) in f.census.areas().iter().enumerate() {
                    assert_eq!(rep.positions[k], c.sample_link().unwrap());
                }
            }
        }
        let bad = BootstrapInputs { census: None, ..inputs };
        assert!(matches!(build_replicate(&bad, Variant::CensusDrm, &[0.5], 0, RngStream::new(1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let f = fixture(3, 50, 10, 4);
        let (ner, drm) = fits(&f);
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        let pred = MethodPredictor::new(vec![Method::Dir, Method::El, Method::Ebel2], PredictSettings::default(), Some(drm.clone()));
        let p = plan(12, Variant::CensusDrm, 9);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| bootstrap_mse(&p, &inputs, &pred).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn zero_area_variance_populations() {
        let f = fixture(3, 50, 10, 5);
        let (mut ner, drm) = fits(&f);
        ner.sigma_v2 = 0.0;
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        let pred = MethodPredictor::new(vec![Method::Ner], PredictSettings::default(), None);
        let r = bootstrap_mse(&plan(20, Variant::CensusNer, 1), &inputs, &pred).unwrap();
        assert!(r.mse[0].iter().flatten().all(|m| m.is_finite() && *m >= 0.0));
    }

    #[test]
    fn standard_error_shrinks_with_replicates() {
        let f = fixture(2, 80, 15, 6);
        let (ner, drm) = fits(&f);
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        let pred = MethodPredictor::new(vec![Method::Dir], PredictSettings::default(), None);
        let spread = |b: usize| {
            let vals: Vec<f64> = (0..40)
                .map(|s| bootstrap_mse(&plan(b, Variant::CensusDrm, 100 + s), &inputs, &pred).unwrap().mse[0][0][1])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        };
        let ratio = spread(50) / spread(200);
        // Expected ratio is 2; 40 seeds leave roughly 15% noise on each spread.
        assert!((1.4..2.9).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn failures_are_counted_or_fatal() {
        struct Flaky(usize);
        impl QuantilePredictor for Flaky {
            fn labels(&self) -> Vec<String> {
                vec!["flaky".into()]
            }
            fn predict(&self, rep: &Replicate<'_>, _: &[f64], _: RngStream) -> Result<Vec<Vec<Vec<f64>>>> {
                if rep.index % self.0 == 0 {
                    Err(Error::Degenerate("boom".into()))
                } else {
                    Ok(vec![rep.truth.clone()])
                }
            }
        }
        let f = fixture(2, 30, 6, 7);
        let (ner, drm) = fits(&f);
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        let r = bootstrap_mse(&plan(40, Variant::CensusDrm, 1), &inputs, &Flaky(20)).unwrap();
        assert_eq!(r.failures, 2);
        assert!(matches!(bootstrap_mse(&plan(40, Variant::CensusDrm, 1), &inputs, &Flaky(10)), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn csv_layout() {
        let f = fixture(2, 30, 6, 8);
        let (ner, drm) = fits(&f);
        let inputs = BootstrapInputs { sample: &f.sample, census: Some(&f.census), ner: &ner, drm: Some(&drm) };
        let r = bootstrap_mse(&plan(5, Variant::CensusDrm, 1), &inputs, &Oracle).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mse.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("area_id,alpha,mse,failures"));
        assert_eq!(lines.count(), 6);
    }
}
