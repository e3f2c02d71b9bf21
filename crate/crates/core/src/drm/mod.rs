//! Density ratio model for the unit-level error distributions.
//!
//! Residuals from the within-area centered least-squares fit are pooled, and
//! the area error distributions are linked through
//! `dG_k / dG_0 = exp(theta_k' q(t))`. The tilts are found by maximizing the
//! concave dual empirical likelihood; every fitted `G_k` is then a weighted
//! step function on all pooled residuals.

mod basis;
mod centralized;
mod dual;
mod predict;

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

pub use basis::Basis;
pub use centralized::{fit_beta_centralized, CentralizedLs};
pub use dual::{maximize_dual, DrmOptions, DualEval, DualProblem, DualSolution, NewtonStep};
pub use predict::{cdf_ebel, cdf_el, EbelVariant};
pub(crate) use predict::{cdf_ebel_at, cdf_el_at};

use crate::data::SurveySample;
use crate::error::{Error, Result};
use crate::quantile::{CdfEstimate, StepBase};
use crate::rng::RngStream;

/// Fitted density ratio model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrmFit {
    pub area_ids: Vec<String>,
    pub basis: Basis,
    pub baseline: usize,
    /// Centralized least-squares slopes.
    pub beta_ls: Vec<f64>,
    /// Residuals per area.
    pub residuals: Vec<Vec<f64>>,
    /// Tilts per area (`theta[baseline]` is zero).
    pub theta: Vec<Vec<f64>>,
    /// Baseline weights for the pooled residuals, in area order.
    pub p_base: Vec<f64>,
    pub loglik_dual: f64,
    /// `ybar_k - xbar_k' beta_ls`.
    pub nu_hat: Vec<f64>,
    /// Sample covariate means.
    pub xbar: Vec<Vec<f64>>,
    pub iterations: usize,
    pub grad_max: f64,
    pub trace: Vec<NewtonStep>,
}

/// Centralized least squares followed by the dual EL fit.
pub fn fit_drm_sample(sample: &SurveySample, opts: &DrmOptions, warm_start: Option<&DrmFit>) -> Result<DrmFit> {
    let ls = fit_beta_centralized(sample)?;
    fit_drm(sample.area_ids(), ls, opts, warm_start)
}

/// Fits the tilts to the residuals carried by `ls`. `warm_start` supplies a
/// starting point for Newton's method (any baseline).
pub fn fit_drm(area_ids: Vec<String>, ls: CentralizedLs, opts: &DrmOptions, warm_start: Option<&DrmFit>) -> Result<DrmFit> {
    if area_ids.len() != ls.residuals.len() {
        return Err(Error::Dimension("area labels do not match residual groups".into()));
    }
    let problem = DualProblem::new(&ls.residuals, opts.basis)?;
    let start: Option<Vec<f64>> = warm_start
        .filter(|w| w.basis == opts.basis && w.theta.len() == ls.residuals.len())
        .map(|w| w.theta.iter().flatten().copied().collect());
    let sol = maximize_dual(&problem, opts, start.as_deref())?;
    let d2 = opts.basis.dim();
    let p_base = problem.base_weights(&sol.theta);
    Ok(DrmFit {
        area_ids,
        basis: opts.basis,
        baseline: opts.baseline,
        beta_ls: ls.beta,
        residuals: ls.residuals,
        theta: sol.theta.chunks(d2).map(<[f64]>::to_vec).collect(),
        p_base,
        loglik_dual: sol.value,
        nu_hat: ls.nu_hat,
        xbar: ls.xbar,
        iterations: sol.iterations,
        grad_max: sol.grad_max,
        trace: sol.trace,
    })
}

/// Area error distribution: a step CDF on every pooled residual.
#[derive(Debug, Clone, PartialEq)]
pub struct GkCdf {
    /// Sorted pooled residuals.
    pub support: Vec<f64>,
    /// Weight of each support point.
    pub weights: Vec<f64>,
}

impl GkCdf {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Right-continuous: mass at or below `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.support.partition_point(|&v| v <= t);
        self.weights[..k].iter().sum()
    }

    pub fn to_cdf(&self) -> Result<CdfEstimate> {
        CdfEstimate::weighted_step(&self.support, &self.weights)
    }

    pub fn step_base(&self) -> Arc<StepBase> {
        Arc::new(StepBase::from_sorted(self.support.clone(), &self.weights))
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.weights).map(|(s, w)| s * w).sum()
    }
}

impl DrmFit {
    pub fn num_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn n(&self) -> usize {
        self.p_base.len()
    }

    pub fn area_index(&self, area_id: &str) -> Result<usize> {
        self.area_ids
            .iter()
            .position(|a| a == area_id)
            .ok_or_else(|| Error::Validation(format!("area {area_id} not in DRM fit")))
    }

    fn pooled(&self) -> impl Iterator<Item = f64> + '_ {
        self.residuals.iter().flatten().copied()
    }

    /// Unnormalized weights `p_i exp(theta_k' q(eps_i))` of area `k`, pooled order.
    pub fn area_weights(&self, k: usize) -> Vec<f64> {
        let th = &self.theta[k];
        self.pooled()
            .zip(&self.p_base)
            .map(|(e, p)| p * self.basis.dot(th, e).exp())
            .collect()
    }

    /// `sum_i p_i exp(theta_r' q(eps_i))` for every area `r`; each should be 1.
    pub fn constraint_sums(&self) -> Vec<f64> {
        (0..self.num_areas()).map(|r| self.area_weights(r).iter().sum()).collect()
    }

    pub fn max_constraint_violation(&self) -> f64 {
        self.constraint_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn gk(&self, area_id: &str) -> Result<GkCdf> {
        Ok(self.gk_at(self.area_index(area_id)?))
    }

    pub fn gk_at(&self, k: usize) -> GkCdf {
        let w = self.area_weights(k);
        let mut pairs: Vec<(f64, f64)> = self.pooled().zip(w).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (support, weights) = pairs.into_iter().unzip();
        GkCdf { support, weights }
    }

    /// Re-expresses the tilts relative to a different baseline area; the
    /// fitted distributions are unchanged.
    pub fn rebased(&self, baseline: usize) -> Result<DrmFit> {
        if baseline >= self.num_areas() {
            return Err(Error::Config(format!("baseline index {baseline} out of range")));
        }
        let mut out = self.clone();
        let b = self.theta[baseline].clone();
        for t in &mut out.theta {
            for (v, s) in t.iter_mut().zip(&b) {
                *v -= s;
            }
        }
        for (p, e) in out.p_base.iter_mut().zip(self.pooled()) {
            *p *= self.basis.dot(&b, e).exp();
        }
        out.baseline = baseline;
        Ok(out)
    }
}

/// iid draws from `G_k`.
pub fn sample_gk(gk: &GkCdf, count: usize, stream: RngStream) -> Result<Vec<f64>> {
    let sampler = GkSampler::new(gk)?;
    let mut rng = stream.rng();
    Ok((0..count).map(|_| sampler.draw(&mut rng)).collect())
}

/// Reusable discrete sampler over the support of a [`GkCdf`].
pub struct GkSampler {
    support: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl GkSampler {
    pub fn new(gk: &GkCdf) -> Result<Self> {
        let index = WeightedIndex::new(&gk.weights)
            .map_err(|e| Error::Degenerate(format!("cannot sample from error distribution: {e}")))?;
        Ok(Self { support: gk.support.clone(), index })
    }

    #[inline]
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.support[self.index.sample(rng)]
    }
}
