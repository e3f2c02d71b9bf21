use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SurveySample;
use crate::error::{Error, Result};
use crate::linalg::{linpred, rcond_sym, solve_sym};

/// Least-squares fit of the within-area centered model, which removes the
/// area effects before the error distributions are modeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralizedLs {
    /// Slope coefficients (no intercept: it is absorbed into `nu_hat`).
    pub beta: Vec<f64>,
    /// `y_kj - ybar_k - (x_kj - xbar_k)' beta`, per area.
    pub residuals: Vec<Vec<f64>>,
    /// `ybar_k - xbar_k' beta`.
    pub nu_hat: Vec<f64>,
    pub xbar: Vec<Vec<f64>>,
}

impl CentralizedLs {
    pub fn rss(&self) -> f64 {
        self.residuals.iter().flatten().map(|r| r * r).sum()
    }
}

pub fn fit_beta_centralized(sample: &SurveySample) -> Result<CentralizedLs> {
    let d = sample.d();
    let xbar = sample.x_means();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut dx = DVector::zeros(d);
    for (area, xb) in sample.areas().iter().zip(&xbar) {
        let ybar = area.y_mean();
        for (j, &y) in area.y().iter().enumerate() {
            for (i, (v, m)) in area.row(j).iter().zip(xb).enumerate() {
                dx[i] = v - m;
            }
            a.ger(1.0, &dx, &dx, 1.0);
            b.axpy(y - ybar, &dx, 1.0);
        }
    }
    let singular = || Error::SingularDesign("within-area centered covariates are rank deficient".into());
    if rcond_sym(&a) < 1e-13 {
        return Err(singular());
    }
    let beta = solve_sym(&a, &b).ok_or_else(singular)?.as_slice().to_vec();
    let residuals = sample
        .areas()
        .iter()
        .zip(&xbar)
        .map(|(area, xb)| {
            let ybar = area.y_mean();
            let centre = linpred(&beta, xb, false);
            area.rows()
                .zip(area.y())
                .map(|(x, &y)| y - ybar - (linpred(&beta, x, false) - centre))
                .collect()
        })
        .collect();
    let nu_hat = sample
        .areas()
        .iter()
        .zip(&xbar)
        .map(|(area, xb)| area.y_mean() - linpred(&beta, xb, false))
        .collect();
    Ok(CentralizedLs { beta, residuals, nu_hat, xbar })
}
