use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaSample, CensusArea, CensusFrame, SurveySample};
use crate::error::{Error, Result};
use crate::linalg::{linpred, rcond_sym, solve_sym};
use crate::quantile::{CdfBuilder, CdfEstimate, StepBase};

/// Grid denominator: the q values are `1/200, ..., 199/200`.
pub const MQ_GRID_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MqOptions {
    pub max_iter: usize,
    /// Stop when the largest coefficient change is at most `tol (1 + |beta|_max)`.
    pub tol: f64,
    /// Half-width of the smoothed sign function, as a multiple of the MAD of y.
    pub smoothing: f64,
}

impl Default for MqOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, smoothing: 1e-4 }
    }
}

/// Per-area M-quantile fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqFit {
    pub area_ids: Vec<String>,
    pub grid: Vec<f64>,
    /// `beta_by_q[k][g]`: intercept-first coefficients of area `k` at `grid[g]`.
    pub beta_by_q: Vec<Vec<Vec<f64>>>,
    /// Unit-level q values, each on the grid.
    pub q_unit: Vec<Vec<f64>>,
    /// Area mean of the unit q values.
    pub q_area: Vec<f64>,
    /// Coefficients at `q_area`.
    pub beta_area: Vec<Vec<f64>>,
    /// `y_kj - x_kj' beta_area_k`.
    pub residuals: Vec<Vec<f64>>,
    /// Number of (area, q) solves that hit the iteration cap.
    pub unconverged: usize,
}

struct AreaDesign {
    x: DMatrix<f64>,
    y: DVector<f64>,
    h: f64,
}

impl AreaDesign {
    fn new(area: &AreaSample, smoothing: f64) -> Result<Self> {
        let n = area.n();
        let p = area.d() + 1;
        let x = DMatrix::from_fn(n, p, |j, c| if c == 0 { 1.0 } else { area.row(j)[c - 1] });
        let xtx = x.transpose() * &x;
        if n < p || rcond_sym(&xtx) < 1e-13 {
            return Err(Error::SingularDesign(format!(
                "area {}: design is rank deficient for the M-quantile fit",
                area.area_id()
            )));
        }
        let y = DVector::from_column_slice(area.y());
        let mad = mad(area.y());
        let spread = if mad > 0.0 {
            mad
        } else {
            let (lo, hi) = area.y().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if hi > lo {
                hi - lo
            } else {
                lo.abs().max(1.0)
            }
        };
        Ok(Self { x, y, h: smoothing * spread })
    }

    /// Smoothed-check IRLS for the q-th M-quantile; returns the coefficients
    /// and whether the tolerance was met.
    fn solve(&self, q: f64, start: &DVector<f64>, opts: &MqOptions) -> (DVector<f64>, bool) {
        let mut beta = start.clone();
        let (n, p) = self.x.shape();
        let mut w = vec![0.0; n];
        for _ in 0..opts.max_iter {
            let r = &self.y - &self.x * &beta;
            for (wj, &rj) in w.iter_mut().zip(r.iter()) {
                let side = if rj > 0.0 { q } else { 1.0 - q };
                *wj = side / rj.abs().max(self.h);
            }
            let mut a = DMatrix::zeros(p, p);
            let mut b = DVector::zeros(p);
            for j in 0..n {
                let xj = self.x.row(j).transpose();
                a.ger(w[j], &xj, &xj, 1.0);
                b.axpy(w[j] * self.y[j], &xj, 1.0);
            }
            let Some(next) = solve_sym(&a, &b) else {
                return (beta, false);
            };
            let change = (&next - &beta).amax();
            let scale = 1.0 + next.amax();
            beta = next;
            if change <= opts.tol * scale {
                return (beta, true);
            }
        }
        (beta, false)
    }

    fn ols(&self) -> DVector<f64> {
        let xt = self.x.transpose();
        solve_sym(&(&xt * &self.x), &(&xt * &self.y)).expect("rank checked")
    }
}

fn mad(y: &[f64]) -> f64 {
    let med = median(y.to_vec());
    median(y.iter().map(|v| (v - med).abs()).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct AreaMq {
    beta_by_q: Vec<Vec<f64>>,
    q_unit: Vec<f64>,
    q_area: f64,
    beta_area: Vec<f64>,
    residuals: Vec<f64>,
    unconverged: usize,
}

fn fit_area(area: &AreaSample, grid: &[f64], opts: &MqOptions) -> Result<AreaMq> {
    let design = AreaDesign::new(area, opts.smoothing)?;
    let mut start = design.ols();
    let mut unconverged = 0;
    let mut fits: Vec<DVector<f64>> = Vec::with_capacity(grid.len());
    // Sweep outward from the median so each solve warm-starts next to its neighbour.
    let mid = grid.len() / 2;
    let mut slots: Vec<Option<DVector<f64>>> = vec![None; grid.len()];
    for g in (0..=mid).rev() {
        let (b, ok) = design.solve(grid[g], &start, opts);
        unconverged += usize::from(!ok);
        start = b.clone();
        slots[g] = Some(b);
    }
    start = slots[mid].clone().expect("median fit");
    for g in mid + 1..grid.len() {
        let (b, ok) = design.solve(grid[g], &start, opts);
        unconverged += usize::from(!ok);
        start = b.clone();
        slots[g] = Some(b);
    }
    fits.extend(slots.into_iter().map(|s| s.expect("filled")));

    let q_unit: Vec<f64> = area
        .rows()
        .zip(area.y())
        .map(|(x, &y)| {
            let mut best = (f64::INFINITY, grid[0]);
            for (g, b) in fits.iter().enumerate() {
                let dev = (y - linpred(b.as_slice(), x, true)).abs();
                if dev < best.0 {
                    best = (dev, grid[g]);
                }
            }
            best.1
        })
        .collect();
    let q_area = q_unit.iter().sum::<f64>() / q_unit.len() as f64;
    let nearest = fits
        .iter()
        .zip(grid)
        .min_by(|a, b| (a.1 - q_area).abs().total_cmp(&(b.1 - q_area).abs()))
        .map(|(b, _)| b.clone())
        .expect("non-empty grid");
    let (beta_area, ok) = design.solve(q_area, &nearest, opts);
    unconverged += usize::from(!ok);
    let residuals = area
        .rows()
        .zip(area.y())
        .map(|(x, &y)| y - linpred(beta_area.as_slice(), x, true))
        .collect();
    Ok(AreaMq {
        beta_by_q: fits.iter().map(|b| b.as_slice().to_vec()).collect(),
        q_unit,
        q_area,
        beta_area: beta_area.as_slice().to_vec(),
        residuals,
        unconverged,
    })
}

/// Area-by-area M-quantile fits on the q grid `{1, ..., 199} / 200`.
pub fn fit_mq(sample: &SurveySample, opts: &MqOptions) -> Result<MqFit> {
    let grid: Vec<f64> = (1..MQ_GRID_SIZE).map(|i| i as f64 / MQ_GRID_SIZE as f64).collect();
    let areas = sample
        .areas()
        .par_iter()
        .map(|a| fit_area(a, &grid, opts))
        .collect::<Result<Vec<_>>>()?;
    let unconverged = areas.iter().map(|a| a.unconverged).sum();
    if unconverged > 0 {
        log::debug!("M-quantile: {unconverged} solves reached the iteration cap");
    }
    let mut fit = MqFit {
        area_ids: sample.area_ids(),
        grid,
        beta_by_q: Vec::new(),
        q_unit: Vec::new(),
        q_area: Vec::new(),
        beta_area: Vec::new(),
        residuals: Vec::new(),
        unconverged,
    };
    for a in areas {
        fit.beta_by_q.push(a.beta_by_q);
        fit.q_unit.push(a.q_unit);
        fit.q_area.push(a.q_area);
        fit.beta_area.push(a.beta_area);
        fit.residuals.push(a.residuals);
    }
    Ok(fit)
}

/// `N_k^-1 [sum_{j in s_k} 1(y_kj <= t) + sum_{j not in s_k} G_k(t - yhat_kj)]`
/// with `G_k` the empirical CDF of the area's M-quantile residuals.
pub fn cdf_mq(fit: &MqFit, sample: &SurveySample, census: &CensusFrame, area: &str) -> Result<CdfEstimate> {
    let k = fit
        .area_ids
        .iter()
        .position(|a| a == area)
        .ok_or_else(|| Error::Validation(format!("area {area} not in M-quantile fit")))?;
    let c = census
        .area(area)
        .ok_or_else(|| Error::Config(format!("area {area} missing from census")))?;
    cdf_mq_at(fit, sample, c, k)
}

pub(crate) fn cdf_mq_at(fit: &MqFit, sample: &SurveySample, census: &CensusArea, k: usize) -> Result<CdfEstimate> {
    let a = sample.area(k);
    if fit.area_ids.get(k).map(String::as_str) != Some(a.area_id()) {
        return Err(Error::Validation(format!("area {} does not match the M-quantile fit", a.area_id())));
    }
    let x = census
        .x_flat()
        .ok_or_else(|| Error::Config(format!("area {}: MQ needs unit-level census covariates", a.area_id())))?;
    if census.sample_link().is_none() {
        return Err(Error::Config(format!(
            "area {}: MQ needs the census sample link to identify sampled units",
            a.area_id()
        )));
    }
    let mask = census.sampled_mask();
    let beta = &fit.beta_area[k];
    let shifts: Vec<f64> = x
        .chunks_exact(census.d())
        .zip(&mask)
        .filter(|(_, &s)| !s)
        .map(|(row, _)| linpred(beta, row, true))
        .collect();
    let mut res = fit.residuals[k].clone();
    res.sort_by(f64::total_cmp);
    let w = vec![1.0 / res.len() as f64; res.len()];
    let base = Arc::new(StepBase::from_sorted(res, &w));
    let big_n = census.size() as f64;
    CdfBuilder::new()
        .atoms_uniform(a.y().to_vec(), big_n)
        .shifted(base, shifts, big_n)
        .build()
}
