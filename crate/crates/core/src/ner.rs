//! Nested-error regression: maximum-likelihood fit, EBLUP small-area means
//! and the normal-theory CDF predictors.
//!
//! The model is `y_kj = z_kj' beta + nu_k + e_kj` with `nu_k ~ N(0, sigma_v2)`
//! and `e_kj ~ N(0, sigma_e2)`, where `z_kj` is the covariate row with a
//! leading 1 when an intercept is fitted. Writing `phi = sigma_v2 / sigma_e2`,
//! the GLS coefficient and the ML error variance are closed-form given `phi`,
//! so the likelihood is maximized over the single ratio `phi`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CensusArea, CensusFrame, SurveySample};
use crate::drm::fit_beta_centralized;
use crate::error::{Error, Result};
use crate::linalg::{contrast, linpred, solve_sym};
use crate::quantile::{CdfBuilder, CdfEstimate};

/// Upper end of the variance-ratio search interval.
pub const PHI_MAX: f64 = 1e6;
const PHI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NerOptions {
    /// Fit an intercept column in addition to the covariates.
    pub intercept: bool,
    /// Iteration cap for the golden-section stage.
    pub max_iter: usize,
}

impl Default for NerOptions {
    fn default() -> Self {
        Self { intercept: true, max_iter: 300 }
    }
}

/// Where the population covariate means used for the EBLUP came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XbarSource {
    Census,
    SampleMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NerBoundary {
    Interior,
    /// Profile optimum at `phi = 0`: no area effect.
    ZeroAreaVariance,
    /// Profile optimum at the upper end of the search interval.
    RatioUpperLimit,
    /// Within-area residuals vanish: the data carry no unit-level noise.
    ZeroNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerFit {
    pub area_ids: Vec<String>,
    pub intercept: bool,
    /// Coefficients, intercept first when fitted.
    pub beta: Vec<f64>,
    pub sigma_v2: f64,
    pub sigma_e2: f64,
    /// Shrinkage factors `gamma_k`.
    pub gamma: Vec<f64>,
    /// `nu_k = ybar_k - zbar_k' beta`.
    pub nu: Vec<f64>,
    /// EBLUP means `Xbar_k' beta + gamma_k nu_k`.
    pub eblup_mean: Vec<f64>,
    pub n_k: Vec<usize>,
    /// Sample covariate means (without the intercept).
    pub xbar_sample: Vec<Vec<f64>>,
    /// Population covariate means used for the EBLUP.
    pub xbar_pop: Vec<Vec<f64>>,
    pub xbar_source: XbarSource,
    /// Maximized log-likelihood; `None` when the fit is degenerate.
    pub loglik: Option<f64>,
    pub boundary: NerBoundary,
    /// Derivative of the profile log-likelihood in `phi` at the optimum.
    pub profile_grad: f64,
}

/// `n_k sigma_v2 / (sigma_e2 + n_k sigma_v2)`, with `0/0` read as 0.
pub fn shrinkage(n_k: usize, sigma_v2: f64, sigma_e2: f64) -> f64 {
    let num = n_k as f64 * sigma_v2;
    if num == 0.0 {
        0.0
    } else {
        num / (sigma_e2 + num)
    }
}

impl NerFit {
    pub fn num_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn area_index(&self, area_id: &str) -> Result<usize> {
        self.area_ids
            .iter()
            .position(|a| a == area_id)
            .ok_or_else(|| Error::Validation(format!("area {area_id} not in NER fit")))
    }

    pub fn sigma_e(&self) -> f64 {
        self.sigma_e2.sqrt()
    }

    /// `delta_k = eblup_k - xbar_k' beta`.
    pub fn delta(&self, k: usize) -> f64 {
        self.eblup_mean[k] - linpred(&self.beta, &self.xbar_sample[k], self.intercept)
    }
}

/// Per-area sufficient statistics for the GLS profile.
struct AreaStats {
    n: f64,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    s: DVector<f64>,
    ty: f64,
}

struct Profile<'a> {
    sample: &'a SurveySample,
    intercept: bool,
    p: usize,
    stats: Vec<AreaStats>,
}

struct ProfilePoint {
    loglik: f64,
    beta: DVector<f64>,
    q: f64,
    grad: f64,
}

impl<'a> Profile<'a> {
    fn new(sample: &'a SurveySample, intercept: bool) -> Self {
        let p = sample.d() + usize::from(intercept);
        let stats = sample
            .areas()
            .iter()
            .map(|a| {
                let mut ztz = DMatrix::zeros(p, p);
                let mut zty = DVector::zeros(p);
                let mut s = DVector::zeros(p);
                let mut z = DVector::zeros(p);
                for (j, &y) in a.y().iter().enumerate() {
                    fill_design(&mut z, a.row(j), intercept);
                    ztz.ger(1.0, &z, &z, 1.0);
                    zty.axpy(y, &z, 1.0);
                    s += &z;
                }
                AreaStats { n: a.n() as f64, ztz, zty, s, ty: a.y().iter().sum() }
            })
            .collect();
        Self { sample, intercept, p, stats }
    }

    fn normal_equations(&self, phi: f64) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        for st in &self.stats {
            let c = phi / (1.0 + st.n * phi);
            a += &st.ztz;
            a.ger(-c, &st.s, &st.s, 1.0);
            b += &st.zty;
            b.axpy(-c * st.ty, &st.s, 1.0);
        }
        (a, b)
    }

    fn eval(&self, phi: f64) -> Result<ProfilePoint> {
        let (a, b) = self.normal_equations(phi);
        let beta = solve_sym(&a, &b)
            .ok_or_else(|| Error::SingularDesign("NER normal equations are singular".into()))?;
        let n = self.sample.n() as f64;
        let mut q = 0.0;
        let mut grad_sum = 0.0;
        let mut logdet = 0.0;
        let mut half_trace = 0.0;
        for (area, st) in self.sample.areas().iter().zip(&self.stats) {
            let (mut ss, mut sr) = (0.0, 0.0);
            for (j, &y) in area.y().iter().enumerate() {
                let r = y - linpred(beta.as_slice(), area.row(j), self.intercept);
                ss += r * r;
                sr += r;
            }
            let denom = 1.0 + st.n * phi;
            q += ss - phi / denom * sr * sr;
            grad_sum += sr * sr / (denom * denom);
            logdet += denom.ln();
            half_trace += st.n / denom;
        }
        let q = q.max(0.0);
        let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + 1.0 + (q / n).ln()) - 0.5 * logdet;
        let grad = 0.5 * n / q * grad_sum - 0.5 * half_trace;
        Ok(ProfilePoint { loglik, beta, q, grad })
    }
}

fn fill_design(z: &mut DVector<f64>, x: &[f64], intercept: bool) {
    if intercept {
        z[0] = 1.0;
        z.as_mut_slice()[1..].copy_from_slice(x);
    } else {
        z.as_mut_slice().copy_from_slice(x);
    }
}

/// Golden-section maximization of `f` on `[lo, hi]`.
fn golden_max(mut lo: f64, mut hi: f64, max_iter: usize, f: impl Fn(f64) -> f64) -> (f64, usize, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut it = 0;
    while hi - lo > PHI_TOL && it < max_iter {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
        it += 1;
    }
    let x = if f1 >= f2 { x1 } else { x2 };
    (x, it, hi - lo)
}

fn phi_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((0..=48).map(|i| 10f64.powf(-6.0 + 0.25 * i as f64)));
    g
}

/// Population covariate means per sample area, from a census when given.
pub fn population_means(sample: &SurveySample, census: Option<&CensusFrame>) -> Result<(Vec<Vec<f64>>, XbarSource)> {
    match census {
        Some(c) => {
            let aligned = c.aligned(sample)?;
            Ok((aligned.iter().map(|a| a.mean().to_vec()).collect(), XbarSource::Census))
        }
        None => Ok((sample.x_means(), XbarSource::SampleMeans)),
    }
}

/// Maximum-likelihood NER fit.
///
/// `census` supplies the population covariate means for the EBLUP; without it
/// the sample means are used and the fit records [`XbarSource::SampleMeans`].
pub fn fit_ner_mle(sample: &SurveySample, census: Option<&CensusFrame>, opts: &NerOptions) -> Result<NerFit> {
    let (xbar_pop, source) = population_means(sample, census)?;
    fit_ner_with_means(sample, xbar_pop, source, opts)
}

pub fn fit_ner_with_means(
    sample: &SurveySample,
    xbar_pop: Vec<Vec<f64>>,
    xbar_source: XbarSource,
    opts: &NerOptions,
) -> Result<NerFit> {
    if xbar_pop.len() != sample.num_areas() || xbar_pop.iter().any(|m| m.len() != sample.d()) {
        return Err(Error::Dimension("population means do not match the sample".into()));
    }
    let within = fit_beta_centralized(sample)?;
    let within_rss = within.rss();
    let within_beta = within.beta;

    let n = sample.n() as f64;
    let grand = sample.areas().iter().flat_map(|a| a.y()).sum::<f64>() / n;
    let tss: f64 = sample.areas().iter().flat_map(|a| a.y()).map(|y| (y - grand).powi(2)).sum();

    let profile = Profile::new(sample, opts.intercept);
    let (beta, sigma_v2, sigma_e2, loglik, boundary, grad) = if within_rss <= 1e-20 * tss.max(f64::MIN_POSITIVE) {
        degenerate_noise(sample, &profile, within_beta, opts.intercept)?
    } else {
        let grid = phi_grid();
        let evals = grid.iter().map(|&p| profile.eval(p)).collect::<Result<Vec<_>>>()?;
        let best = (0..grid.len())
            .max_by(|&a, &b| evals[a].loglik.total_cmp(&evals[b].loglik).then(b.cmp(&a)))
            .unwrap();
        let lo = if best == 0 { 0.0 } else { grid[best - 1] };
        let hi = if best + 1 < grid.len() { grid[best + 1] } else { PHI_MAX };
        let ll = |p: f64| profile.eval(p).map(|e| e.loglik).unwrap_or(f64::NEG_INFINITY);
        let (mut phi, iters, width) = golden_max(lo, hi, opts.max_iter, ll);
        if width > PHI_TOL * phi.max(1.0) {
            return Err(Error::NonConvergence {
                what: "NER profile likelihood search",
                iterations: iters,
                detail: format!("bracket width {width:e} around phi = {phi:e}"),
                trace: vec![format!("bracket [{lo:e}, {hi:e}]")],
            });
        }
        let mut point = profile.eval(phi)?;
        // Newton polish on the analytic profile derivative.
        for _ in 0..8 {
            let h = 1e-6 * phi.max(1e-4);
            if phi - h < lo || phi + h > hi {
                break;
            }
            let gp = profile.eval(phi + h)?.grad;
            let gm = profile.eval(phi - h)?.grad;
            let curv = (gp - gm) / (2.0 * h);
            if !(curv < 0.0) {
                break;
            }
            let cand = phi - point.grad / curv;
            if !(cand > lo && cand < hi) {
                break;
            }
            let cp = profile.eval(cand)?;
            if cp.loglik < point.loglik {
                break;
            }
            let done = (cand - phi).abs() <= PHI_TOL;
            phi = cand;
            point = cp;
            if done {
                break;
            }
        }
        let at_zero = profile.eval(0.0)?;
        let mut boundary = NerBoundary::Interior;
        if at_zero.grad <= 0.0 && at_zero.loglik >= point.loglik - 1e-12 * point.loglik.abs().max(1.0) {
            phi = 0.0;
            point = at_zero;
            boundary = NerBoundary::ZeroAreaVariance;
        } else if hi == PHI_MAX && PHI_MAX - phi <= 1e-6 * PHI_MAX {
            boundary = NerBoundary::RatioUpperLimit;
        }
        let sigma_e2 = point.q / n;
        (point.beta.as_slice().to_vec(), phi * sigma_e2, sigma_e2, Some(point.loglik), boundary, point.grad)
    };

    let mut gamma = Vec::with_capacity(sample.num_areas());
    let mut nu = Vec::with_capacity(sample.num_areas());
    let mut eblup = Vec::with_capacity(sample.num_areas());
    let xbar_sample = sample.x_means();
    for (k, area) in sample.areas().iter().enumerate() {
        let g = shrinkage(area.n(), sigma_v2, sigma_e2);
        let v = area.y_mean() - linpred(&beta, &xbar_sample[k], opts.intercept);
        gamma.push(g);
        nu.push(v);
        eblup.push(linpred(&beta, &xbar_pop[k], opts.intercept) + g * v);
    }

    Ok(NerFit {
        area_ids: sample.area_ids(),
        intercept: opts.intercept,
        beta,
        sigma_v2,
        sigma_e2,
        gamma,
        nu,
        eblup_mean: eblup,
        n_k: sample.areas().iter().map(|a| a.n()).collect(),
        xbar_sample,
        xbar_pop,
        xbar_source,
        loglik,
        boundary,
        profile_grad: grad,
    })
}

type FitParts = (Vec<f64>, f64, f64, Option<f64>, NerBoundary, f64);

/// No within-area noise: the likelihood is unbounded as `sigma_e2 -> 0`.
fn degenerate_noise(sample: &SurveySample, profile: &Profile, within_beta: Vec<f64>, intercept: bool) -> Result<FitParts> {
    let pooled = profile.eval(0.0)?;
    let n = sample.n() as f64;
    let scale: f64 = sample.areas().iter().flat_map(|a| a.y()).map(|y| y * y).sum::<f64>() / n;
    if pooled.q / n <= 1e-20 * scale.max(f64::MIN_POSITIVE) {
        return Ok((pooled.beta.as_slice().to_vec(), 0.0, 0.0, None, NerBoundary::ZeroNoise, 0.0));
    }
    // Area effects only: slopes from the within fit, intercept absorbs their mean.
    let effects: Vec<f64> = sample
        .areas()
        .iter()
        .map(|a| a.y_mean() - linpred(&within_beta, &a.x_mean(), false))
        .collect();
    let m = effects.len() as f64;
    let mean = effects.iter().sum::<f64>() / m;
    let (beta, sigma_v2) = if intercept {
        let mut b = vec![mean];
        b.extend(within_beta);
        (b, effects.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m)
    } else {
        (within_beta, effects.iter().map(|e| e * e).sum::<f64>() / m)
    };
    Ok((beta, sigma_v2, 0.0, None, NerBoundary::ZeroNoise, 0.0))
}

/// Gaussian log-likelihood at `(sigma_v2, sigma_e2)` with beta at its GLS value.
pub fn ner_loglik(sample: &SurveySample, sigma_v2: f64, sigma_e2: f64, intercept: bool) -> Result<f64> {
    if !(sigma_e2 > 0.0 && sigma_v2 >= 0.0) {
        return Err(Error::Validation("variances out of range".into()));
    }
    let profile = Profile::new(sample, intercept);
    let phi = sigma_v2 / sigma_e2;
    let pt = profile.eval(phi)?;
    let n = sample.n() as f64;
    let logdet: f64 = sample.areas().iter().map(|a| (1.0 + a.n() as f64 * phi).ln()).sum();
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * sigma_e2).ln() - 0.5 * logdet - 0.5 * pt.q / sigma_e2)
}

/// Normal-theory CDF predictor centred on the EBLUP mean:
/// `y -> n_k^-1 sum_j Phi((y - (x_kj - xbar_k)' beta - eblup_k) / sigma_e)`.
pub fn cdf_ner(fit: &NerFit, sample: &SurveySample, area: &str) -> Result<CdfEstimate> {
    let k = fit.area_index(area)?;
    cdf_ner_at(fit, sample, k)
}

pub(crate) fn cdf_ner_at(fit: &NerFit, sample: &SurveySample, k: usize) -> Result<CdfEstimate> {
    let a = sample.area(k);
    check_area(fit, a.area_id(), k)?;
    if !(fit.sigma_e2 > 0.0) {
        return Err(Error::Degenerate(format!("area {}: sigma_e is zero", a.area_id())));
    }
    let xbar = &fit.xbar_sample[k];
    let centers = a
        .rows()
        .map(|x| contrast(&fit.beta, x, xbar, fit.intercept) + fit.eblup_mean[k])
        .collect::<Vec<_>>();
    let n = centers.len() as f64;
    CdfBuilder::new().gaussian(centers, fit.sigma_e(), n)?.build()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EbVariant {
    /// Observed indicators for sampled units, model CDF for the rest.
    Eb1,
    /// Model CDF for every census unit.
    Eb2,
}

/// Census-based EBP-type predictors built from the NER fit.
pub fn cdf_eb(fit: &NerFit, sample: &SurveySample, census: &CensusFrame, area: &str, variant: EbVariant) -> Result<CdfEstimate> {
    let k = fit.area_index(area)?;
    let c = census
        .area(area)
        .ok_or_else(|| Error::Config(format!("area {area} missing from census")))?;
    cdf_eb_at(fit, sample, c, k, variant)
}

pub(crate) fn cdf_eb_at(fit: &NerFit, sample: &SurveySample, census: &CensusArea, k: usize, variant: EbVariant) -> Result<CdfEstimate> {
    let a = sample.area(k);
    check_area(fit, a.area_id(), k)?;
    if !(fit.sigma_e2 > 0.0) {
        return Err(Error::Degenerate(format!("area {}: sigma_e is zero", a.area_id())));
    }
    let x = census
        .x_flat()
        .ok_or_else(|| Error::Config(format!("area {}: EB predictors need unit-level census covariates", a.area_id())))?;
    let big_n = census.size() as f64;
    let mask = match variant {
        EbVariant::Eb1 => {
            if census.sample_link().is_none() {
                return Err(Error::Config(format!(
                    "area {}: EB1 needs the census sample link to identify sampled units",
                    a.area_id()
                )));
            }
            census.sampled_mask()
        }
        EbVariant::Eb2 => vec![false; census.size()],
    };
    let centers: Vec<f64> = x
        .chunks_exact(census.d())
        .zip(&mask)
        .filter(|(_, &s)| !s)
        .map(|(row, _)| fit.nu[k] + linpred(&fit.beta, row, fit.intercept))
        .collect();
    let mut b = CdfBuilder::new().gaussian(centers, fit.sigma_e(), big_n)?;
    if variant == EbVariant::Eb1 {
        b = b.atoms_uniform(a.y().to_vec(), big_n);
    }
    b.build()
}

fn check_area(fit: &NerFit, id: &str, k: usize) -> Result<()> {
    if fit.area_ids.get(k).map(String::as_str) != Some(id) {
        return Err(Error::Validation(format!("area {id} does not match the NER fit")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AreaSample, CensusArea};
    use crate::rng::RngStream;
    use rand_distr::{Distribution, Normal, Uniform};

    fn simulate(m: usize, nk: usize, sv2: f64, se2: f64, seed: u64) -> SurveySample {
        let mut rng = RngStream::new(seed, 0).rng();
        let u = Uniform::new(0.0, 10.0).unwrap();
        let v = Normal::new(0.0, sv2.sqrt()).unwrap();
        let e = Normal::new(0.0, se2.sqrt()).unwrap();
        let areas = (0..m)
            .map(|k| {
                let nu = if sv2 > 0.0 { v.sample(&mut rng) } else { 0.0 };
                let x: Vec<Vec<f64>> = (0..nk).map(|_| vec![u.sample(&mut rng)]).collect();
                let y = x.iter().map(|r| 1.0 + 0.5 * r[0] + nu + e.sample(&mut rng)).collect();
                AreaSample::new(format!("a{k}"), x, y).unwrap()
            })
            .collect();
        SurveySample::new(areas).unwrap()
    }

    #[test]
    fn noiseless_recovers_beta() {
        let areas = (0..2)
            .map(|k| {
                let x: Vec<Vec<f64>> = (0..5).map(|j| vec![j as f64 + k as f64, (j * j) as f64]).collect();
                let y = x.iter().map(|r| 2.0 - 1.5 * r[0] + 0.25 * r[1]).collect();
                AreaSample::new(format!("a{k}"), x, y).unwrap()
            })
            .collect();
        let s = SurveySample::new(areas).unwrap();
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        assert_eq!(fit.boundary, NerBoundary::ZeroNoise);
        assert_eq!(fit.sigma_e2, 0.0);
        for (b, t) in fit.beta.iter().zip([2.0, -1.5, 0.25]) {
            assert!((b - t).abs() < 1e-10, "{b} vs {t}");
        }
        assert!(matches!(cdf_ner(&fit, &s, "a0"), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_area_variance_boundary() {
        // Identical designs and residual patterns in every area: area means of
        // the OLS residuals are exactly zero.
        let pattern = [1.0, -1.0, 0.5, -0.5];
        let areas = (0..3)
            .map(|k| {
                let x: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 3.0].iter().map(|&v| vec![v]).collect();
                let y = x.iter().zip(pattern).map(|(r, e)| 1.0 + 2.0 * r[0] + e).collect();
                AreaSample::new(format!("a{k}"), x, y).unwrap()
            })
            .collect();
        let s = SurveySample::new(areas).unwrap();
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        assert_eq!(fit.boundary, NerBoundary::ZeroAreaVariance);
        assert_eq!(fit.sigma_v2, 0.0);
        for k in 0..3 {
            assert_eq!(fit.gamma[k], 0.0);
            let xb = linpred(&fit.beta, &fit.xbar_pop[k], true);
            assert!((fit.eblup_mean[k] - xb).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_design() {
        let areas = (0..2)
            .map(|k| AreaSample::new(format!("a{k}"), vec![vec![1.0]; 3], vec![1.0, 2.0, 3.0]).unwrap())
            .collect();
        let s = SurveySample::new(areas).unwrap();
        assert!(matches!(fit_ner_mle(&s, None, &NerOptions::default()), Err(Error::SingularDesign(_))));
    }

    #[test]
    fn eblup_identity_and_shrinkage() {
        let s = simulate(8, 6, 1.0, 2.0, 3);
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        for k in 0..s.num_areas() {
            let g = shrinkage(fit.n_k[k], fit.sigma_v2, fit.sigma_e2);
            assert!((g - fit.gamma[k]).abs() < 1e-15);
            let e = linpred(&fit.beta, &fit.xbar_pop[k], true) + fit.gamma[k] * fit.nu[k];
            assert!((e - fit.eblup_mean[k]).abs() <= 1e-12 * e.abs().max(1.0));
        }
        assert!(shrinkage(10, 1.0, 2.0) > shrinkage(5, 1.0, 2.0));
        assert!(shrinkage(5, 1.5, 2.0) > shrinkage(5, 1.0, 2.0));
    }

    #[test]
    fn local_maximum_under_perturbation() {
        let s = simulate(6, 5, 1.0, 1.0, 11);
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        assert_eq!(fit.boundary, NerBoundary::Interior);
        let best = ner_loglik(&s, fit.sigma_v2, fit.sigma_e2, true).unwrap();
        assert!((best - fit.loglik.unwrap()).abs() < 1e-9 * best.abs());
        let mut rng = RngStream::new(5, 5).rng();
        let u = Uniform::new(0.8, 1.2).unwrap();
        for _ in 0..50 {
            let v = fit.sigma_v2 * u.sample(&mut rng);
            let e = fit.sigma_e2 * u.sample(&mut rng);
            assert!(best >= ner_loglik(&s, v, e, true).unwrap());
        }
        assert!(fit.profile_grad.abs() < 1e-6 * s.n() as f64);
    }

    #[test]
    fn variance_recovery_on_average() {
        let (mut se, mut sv) = (0.0, 0.0);
        for r in 0..100 {
            let s = simulate(20, 30, 1.0, 2.0, 1000 + r);
            let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
            se += fit.sigma_e2 / 100.0;
            sv += fit.sigma_v2 / 100.0;
        }
        assert!((se - 2.0).abs() < 0.3, "sigma_e2 average {se}");
        assert!((sv - 1.0).abs() < 0.5, "sigma_v2 average {sv}");
    }

    fn integrate_mean(f: &CdfEstimate, lo: f64, hi: f64) -> f64 {
        // E[Y] = lo + int_lo^hi (1 - F) dy for a distribution concentrated on [lo, hi].
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * (1.0 - f.eval(lo + i as f64 * h));
        }
        lo + s * h / 3.0
    }

    #[test]
    fn cdf_ner_mean_and_median() {
        let s = simulate(5, 8, 1.0, 1.0, 21);
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        let f = cdf_ner(&fit, &s, "a2").unwrap();
        let m = fit.eblup_mean[2];
        assert!((f.mean() - m).abs() < 1e-10);
        let num = integrate_mean(&f, m - 40.0, m + 40.0);
        assert!((num - m).abs() < 1e-8, "{num} vs {m}");
        let mut prev = 0.0;
        for i in 0..1000 {
            let v = f.eval(m - 10.0 + 0.02 * i as f64);
            assert!(v >= prev && (0.0..=1.0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn cdf_ner_symmetric_median() {
        // Covariates symmetric about their mean: the mixture is symmetric about the EBLUP.
        let areas = (0..3)
            .map(|k| {
                let x: Vec<Vec<f64>> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|&v| vec![v]).collect();
                let y = x.iter().enumerate().map(|(j, r)| 0.3 * r[0] + k as f64 + 0.1 * ((j * 7 + k) % 5) as f64).collect();
                AreaSample::new(format!("a{k}"), x, y).unwrap()
            })
            .collect();
        let s = SurveySample::new(areas).unwrap();
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        let f = cdf_ner(&fit, &s, "a1").unwrap();
        // Oracle: bisection on the explicit mixture.
        let xbar = 0.0;
        let sd = fit.sigma_e2.sqrt();
        let slope = fit.beta[1];
        let explicit = |y: f64| {
            [-2.0, -1.0, 0.0, 1.0, 2.0]
                .iter()
                .map(|&x: &f64| crate::normal_cdf((y - slope * (x - xbar) - fit.eblup_mean[1]) / sd))
                .sum::<f64>()
                / 5.0
        };
        let (mut lo, mut hi) = (fit.eblup_mean[1] - 50.0, fit.eblup_mean[1] + 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if explicit(mid) >= 0.5 {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert!((f.invert(0.5).unwrap() - hi).abs() < 1e-6);
        assert!((hi - fit.eblup_mean[1]).abs() < 1e-6);
    }

    #[test]
    fn single_atom_mixture() {
        let areas = (0..2)
            .map(|k| AreaSample::new(format!("a{k}"), vec![vec![1.0], vec![2.0], vec![3.0]], vec![1.0 + k as f64, 2.5, 2.9]).unwrap())
            .collect();
        let s = SurveySample::new(areas).unwrap();
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        // Middle unit sits at the area mean: its component is Phi((y - eblup)/sigma_e).
        let xb = &fit.xbar_sample[0];
        assert_eq!(contrast(&fit.beta, &[2.0], xb, true), 0.0);
    }

    #[test]
    fn eb_variants() {
        let s = simulate(3, 4, 1.0, 1.0, 8);
        let fit = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        // All units sampled: EB1 is the sample ECDF.
        let a = s.area(0);
        let c = CensusArea::full("a0", 1, a.x_flat().to_vec(), Some((0..a.n()).collect())).unwrap();
        let eb1 = cdf_eb_at(&fit, &s, &c, 0, EbVariant::Eb1).unwrap();
        let ecdf = CdfEstimate::empirical(a.y()).unwrap();
        for al in [0.1, 0.25, 0.5, 0.6, 0.9] {
            assert_eq!(eb1.invert(al).unwrap(), ecdf.invert(al).unwrap());
        }
        // EB1 without a link is a configuration error.
        let nolink = CensusArea::full("a0", 1, a.x_flat().to_vec(), None).unwrap();
        assert!(matches!(cdf_eb_at(&fit, &s, &nolink, 0, EbVariant::Eb1), Err(Error::Config(_))));
        // EB2 with nu = 0 and one census row: a single normal CDF.
        let mut f0 = fit.clone();
        f0.nu[0] = 0.0;
        let one = CensusArea::full("a0", 1, vec![2.0], None).unwrap();
        let eb2 = cdf_eb_at(&f0, &s, &one, 0, EbVariant::Eb2).unwrap();
        let mu = linpred(&f0.beta, &[2.0], true);
        for y in [-1.0, 0.0, 1.5, 3.0] {
            let expect = crate::normal_cdf((y - mu) / f0.sigma_e());
            assert!((eb2.eval(y) - expect).abs() < 1e-15);
        }
    }
}
