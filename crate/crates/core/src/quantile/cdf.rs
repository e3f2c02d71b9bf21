use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CdfKind {
    /// Finite weighted step function (empirical and EL-type predictors).
    Step,
    /// Smooth mixture of normal components, possibly with point masses.
    GaussianMixture,
    /// Step function built from Monte-Carlo draws.
    McMixture,
}

/// A weighted step function used as the building block of shifted mixtures:
/// sorted support points and their cumulative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBase {
    support: Vec<f64>,
    cum: Vec<f64>,
}

impl StepBase {
    /// `support` must be sorted ascending and `weights` non-negative.
    pub fn from_sorted(support: Vec<f64>, weights: &[f64]) -> Self {
        debug_assert!(support.windows(2).all(|w| w[0] <= w[1]));
        let mut acc = 0.0;
        let cum = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { support, cum }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 {
            self.cum[0]
        } else {
            self.cum[i] - self.cum[i - 1]
        }
    }

    /// Mass at or below `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.support.partition_point(|&v| v <= t);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1]
        }
    }

    fn mean(&self) -> f64 {
        (0..self.support.len()).map(|i| self.weight(i) * self.support[i]).sum()
    }

    fn second_moment(&self) -> f64 {
        (0..self.support.len()).map(|i| self.weight(i) * self.support[i].powi(2)).sum()
    }
}

/// Point masses of equal or explicit weight.
#[derive(Debug, Clone, PartialEq)]
struct Atoms {
    values: Vec<f64>,
    cum: Vec<f64>,
}

impl Atoms {
    fn count_le(&self, y: f64) -> usize {
        self.values.partition_point(|&v| v <= y)
    }

    fn eval(&self, y: f64) -> f64 {
        match self.count_le(y) {
            0 => 0.0,
            k => self.cum[k - 1],
        }
    }

    fn weight(&self, i: usize) -> f64 {
        if i == 0 {
            self.cum[0]
        } else {
            self.cum[i] - self.cum[i - 1]
        }
    }
}

/// `denom^-1 * sum_j base(y - shift_j)`, where the jump points are the float
/// sums `shift_j + support_i`.
#[derive(Debug, Clone, PartialEq)]
struct Shifted {
    base: Arc<StepBase>,
    shifts: Vec<f64>,
    denom: f64,
}

impl Shifted {
    /// Returns (number of jump points <= y, mass at or below y).
    fn count_and_eval(&self, y: f64) -> (usize, f64) {
        let e = &self.base.support;
        let mut p = e.len();
        let mut count = 0usize;
        let mut mass = 0.0;
        for &c in &self.shifts {
            while p > 0 && c + e[p - 1] > y {
                p -= 1;
            }
            if p == 0 {
                break;
            }
            count += p;
            mass += self.base.cum[p - 1];
        }
        (count, mass / self.denom)
    }

    /// Jump points in (lo, hi].
    fn points_between(&self, lo: f64, hi: f64, out: &mut Vec<f64>) {
        let e = &self.base.support;
        let mut start = e.len();
        for &c in &self.shifts {
            while start > 0 && c + e[start - 1] > lo {
                start -= 1;
            }
            for &v in &e[start..] {
                let s = c + v;
                if s > hi {
                    break;
                }
                out.push(s);
            }
        }
    }

    fn min(&self) -> f64 {
        self.shifts[0] + self.base.support[0]
    }

    fn max(&self) -> f64 {
        self.shifts[self.shifts.len() - 1] + self.base.support[self.base.support.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Gaussian {
    centers: Vec<f64>,
    sd: f64,
    denom: f64,
}

impl Gaussian {
    fn eval(&self, y: f64) -> f64 {
        self.centers.iter().map(|&c| normal_cdf((y - c) / self.sd)).sum::<f64>() / self.denom
    }

    /// CDF and density at `y`.
    fn eval_with_density(&self, y: f64) -> (f64, f64) {
        let (mut f, mut d) = (0.0, 0.0);
        for &c in &self.centers {
            let z = (y - c) / self.sd;
            f += normal_cdf(z);
            d += (-0.5 * z * z).exp();
        }
        let norm = self.denom * self.sd * (2.0 * std::f64::consts::PI).sqrt();
        (f / self.denom, d / norm)
    }
}

/// A monotone CDF evaluator that supports exact (step kinds) or bisection
/// (smooth kinds) quantile inversion.
///
/// Internally the CDF is a sum of up to three parts: explicit point masses, a
/// mixture of shifted copies of one step function, and a mixture of normal
/// components with a common scale. All predictors in the crate are
/// expressible this way.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfEstimate {
    kind: CdfKind,
    atoms: Option<Atoms>,
    shifted: Option<Shifted>,
    gaussian: Option<Gaussian>,
}

/// Incremental constructor for [`CdfEstimate`].
#[derive(Debug, Default)]
pub struct CdfBuilder {
    kind: Option<CdfKind>,
    atoms: Option<Atoms>,
    shifted: Option<Shifted>,
    gaussian: Option<Gaussian>,
}

impl CdfBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kind(mut self, kind: CdfKind) -> Self {
        self.kind = Some(kind);
        self
    }

    /// Point masses of `1/denom` each.
    pub fn atoms_uniform(mut self, mut values: Vec<f64>, denom: f64) -> Self {
        if values.is_empty() {
            return self;
        }
        values.sort_by(f64::total_cmp);
        let cum = (1..=values.len()).map(|i| i as f64 / denom).collect();
        self.atoms = Some(Atoms { values, cum });
        self
    }

    /// Point masses with explicit weights.
    pub fn atoms_weighted(mut self, values: &[f64], weights: &[f64]) -> Self {
        let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
        if pairs.is_empty() {
            return self;
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let (values, cum) = pairs
            .into_iter()
            .map(|(v, w)| {
                acc += w;
                (v, acc)
            })
            .unzip();
        self.atoms = Some(Atoms { values, cum });
        self
    }

    /// Point masses given as groups that share one weight each.
    pub fn atoms_grouped(mut self, groups: Vec<(Vec<f64>, f64)>) -> Self {
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (mut values, w) in groups {
            values.sort_unstable_by(f64::total_cmp);
            let mut out = Vec::with_capacity(merged.len() + values.len());
            let (mut i, mut j) = (0, 0);
            while i < merged.len() || j < values.len() {
                if j == values.len() || (i < merged.len() && merged[i].0 <= values[j]) {
                    out.push(merged[i]);
                    i += 1;
                } else {
                    out.push((values[j], w));
                    j += 1;
                }
            }
            merged = out;
        }
        if merged.is_empty() {
            return self;
        }
        let mut acc = 0.0;
        let (values, cum) = merged
            .into_iter()
            .map(|(v, w)| {
                acc += w;
                (v, acc)
            })
            .unzip();
        self.atoms = Some(Atoms { values, cum });
        self
    }

    /// `denom^-1 * sum_j base(y - shift_j)`.
    pub fn shifted(mut self, base: Arc<StepBase>, mut shifts: Vec<f64>, denom: f64) -> Self {
        if shifts.is_empty() || base.support.is_empty() {
            return self;
        }
        shifts.sort_by(f64::total_cmp);
        self.shifted = Some(Shifted { base, shifts, denom });
        self
    }

    /// `denom^-1 * sum_j Phi((y - center_j) / sd)`.
    pub fn gaussian(mut self, centers: Vec<f64>, sd: f64, denom: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::Degenerate(format!("normal component scale must be positive, got {sd}")));
        }
        if !centers.is_empty() {
            self.gaussian = Some(Gaussian { centers, sd, denom });
        }
        Ok(self)
    }

    pub fn build(self) -> Result<CdfEstimate> {
        if self.atoms.is_none() && self.shifted.is_none() && self.gaussian.is_none() {
            return Err(Error::Degenerate("CDF has no mass".into()));
        }
        let kind = self.kind.unwrap_or(if self.gaussian.is_some() {
            CdfKind::GaussianMixture
        } else {
            CdfKind::Step
        });
        let cdf = CdfEstimate { kind, atoms: self.atoms, shifted: self.shifted, gaussian: self.gaussian };
        let total = cdf.total_mass();
        if !(total.is_finite() && (total - 1.0).abs() <= 1e-6) {
            return Err(Error::Degenerate(format!("CDF total mass {total} differs from 1 by more than 1e-6")));
        }
        Ok(cdf)
    }
}

const SMOOTH_TOL: f64 = 1e-10;
const CANDIDATE_LIMIT: usize = 48;

impl CdfEstimate {
    /// Empirical CDF with mass `1/n` on each value.
    pub fn empirical(values: &[f64]) -> Result<Self> {
        CdfBuilder::new().atoms_uniform(values.to_vec(), values.len() as f64).build()
    }

    /// Weighted step CDF.
    pub fn weighted_step(values: &[f64], weights: &[f64]) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Validation("step weights must be non-negative".into()));
        }
        CdfBuilder::new().atoms_weighted(values, weights).build()
    }

    /// Equal-weight normal mixture with common scale `sd`.
    pub fn gaussian_mixture(centers: Vec<f64>, sd: f64) -> Result<Self> {
        let n = centers.len() as f64;
        CdfBuilder::new().gaussian(centers, sd, n)?.build()
    }

    pub fn kind(&self) -> CdfKind {
        self.kind
    }

    pub fn is_step(&self) -> bool {
        self.gaussian.is_none()
    }

    pub fn eval(&self, y: f64) -> f64 {
        let mut f = 0.0;
        if let Some(a) = &self.atoms {
            f += a.eval(y);
        }
        if let Some(s) = &self.shifted {
            f += s.count_and_eval(y).1;
        }
        if let Some(g) = &self.gaussian {
            f += g.eval(y);
        }
        f
    }

    fn count_and_eval(&self, y: f64) -> (usize, f64) {
        let (mut count, mut f) = (0, 0.0);
        if let Some(a) = &self.atoms {
            count += a.count_le(y);
            f += a.eval(y);
        }
        if let Some(s) = &self.shifted {
            let (c, m) = s.count_and_eval(y);
            count += c;
            f += m;
        }
        (count, f)
    }

    pub fn total_mass(&self) -> f64 {
        let mut t = 0.0;
        if let Some(a) = &self.atoms {
            t += a.cum.last().copied().unwrap_or(0.0);
        }
        if let Some(s) = &self.shifted {
            t += s.base.total() * s.shifts.len() as f64 / s.denom;
        }
        if let Some(g) = &self.gaussian {
            t += g.centers.len() as f64 / g.denom;
        }
        t
    }

    /// Mean of the distribution, computed in closed form.
    pub fn mean(&self) -> f64 {
        let mut m = 0.0;
        if let Some(a) = &self.atoms {
            m += (0..a.values.len()).map(|i| a.weight(i) * a.values[i]).sum::<f64>();
        }
        if let Some(s) = &self.shifted {
            let n_shift = s.shifts.len() as f64;
            m += (n_shift * s.base.mean() + s.base.total() * s.shifts.iter().sum::<f64>()) / s.denom;
        }
        if let Some(g) = &self.gaussian {
            m += g.centers.iter().sum::<f64>() / g.denom;
        }
        m / self.total_mass()
    }

    fn scale(&self) -> f64 {
        let mut m2 = 0.0;
        if let Some(a) = &self.atoms {
            m2 += (0..a.values.len()).map(|i| a.weight(i) * a.values[i].powi(2)).sum::<f64>();
        }
        if let Some(s) = &self.shifted {
            let b = &s.base;
            let (bm, bm2, bt) = (b.mean(), b.second_moment(), b.total());
            m2 += s
                .shifts
                .iter()
                .map(|&c| bm2 + 2.0 * c * bm + c * c * bt)
                .sum::<f64>()
                / s.denom;
        }
        if let Some(g) = &self.gaussian {
            m2 += g.centers.iter().map(|&c| c * c + g.sd * g.sd).sum::<f64>() / g.denom;
        }
        let mean = self.mean();
        let var = (m2 / self.total_mass() - mean * mean).max(0.0);
        let floor = self.gaussian.as_ref().map(|g| g.sd).unwrap_or(0.0);
        var.sqrt().max(floor).max(1e-12 * (1.0 + mean.abs()))
    }

    fn step_min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        if let Some(a) = &self.atoms {
            lo = lo.min(a.values[0]);
            hi = hi.max(a.values[a.values.len() - 1]);
        }
        if let Some(s) = &self.shifted {
            lo = lo.min(s.min());
            hi = hi.max(s.max());
        }
        (lo, hi)
    }

    /// Every jump point of a step CDF, sorted (with repeats). Intended for
    /// small CDFs and tests.
    pub fn support_points(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(a) = &self.atoms {
            out.extend_from_slice(&a.values);
        }
        if let Some(s) = &self.shifted {
            s.points_between(f64::NEG_INFINITY, f64::INFINITY, &mut out);
        }
        out.sort_by(f64::total_cmp);
        out
    }

    /// `inf { y : F(y) >= alpha }`.
    pub fn invert(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::AlphaDomain(alpha));
        }
        Ok(if self.gaussian.is_some() {
            self.invert_smooth(alpha)
        } else if self.shifted.is_none() {
            self.invert_atoms(alpha)
        } else {
            self.invert_step(alpha)
        })
    }

    /// Inverts several levels, sharing function evaluations between them.
    pub fn invert_many(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        if let Some(&a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::AlphaDomain(a));
        }
        if self.gaussian.is_some() || self.shifted.is_none() {
            return alphas.iter().map(|&a| self.invert(a)).collect();
        }
        let mut seen = Vec::new();
        Ok(alphas.iter().map(|&a| self.invert_step_cached(a, &mut seen)).collect())
    }

    fn invert_atoms(&self, alpha: f64) -> f64 {
        let a = self.atoms.as_ref().expect("atoms present");
        let i = a.cum.partition_point(|&c| c < alpha);
        a.values[i.min(a.values.len() - 1)]
    }

    fn invert_step(&self, alpha: f64) -> f64 {
        self.invert_step_cached(alpha, &mut Vec::new())
    }

    /// `seen` holds earlier `(y, count, F(y))` evaluations; they only serve to
    /// tighten the starting bracket.
    fn invert_step_cached(&self, alpha: f64, seen: &mut Vec<(f64, usize, f64)>) -> f64 {
        let (min, max) = self.step_min_max();
        if seen.is_empty() {
            let (c, f) = self.count_and_eval(max);
            seen.push((max, c, f));
        }
        let (mut hi, mut count_hi, mut f_hi) = seen[0];
        if f_hi < alpha {
            return hi;
        }
        let (mut lo, mut count_lo, mut f_lo) = (min.next_down(), 0usize, 0.0);
        for &(y, c, f) in &seen[1..] {
            if f >= alpha {
                if y < hi {
                    (hi, count_hi, f_hi) = (y, c, f);
                }
            } else if y > lo {
                (lo, count_lo, f_lo) = (y, c, f);
            }
        }
        // Narrow (lo, hi] until it holds only a handful of jump points. Each
        // round probes just either side of the linearly interpolated root,
        // with a bisection round whenever that fails to halve the bracket.
        let mut bisect = false;
        let mut prev_est: Option<f64> = None;
        for _ in 0..2100 {
            if count_hi - count_lo <= CANDIDATE_LIMIT {
                break;
            }
            let width = hi - lo;
            let probes = if bisect || !(f_hi > f_lo) {
                [lo + 0.5 * width, f64::NAN]
            } else {
                let est = lo + (alpha - f_lo) / (f_hi - f_lo) * width;
                let narrow = width * (CANDIDATE_LIMIT / 3) as f64 / (count_hi - count_lo) as f64;
                // Successive estimates approach the root about as fast as
                // their differences shrink, which sizes the probe window.
                let guess = prev_est.map_or(0.05 * width, |p| 2.0 * (est - p).abs());
                prev_est = Some(est);
                let half = narrow.max(guess);
                [est - half, est + half]
            };
            let mut moved = false;
            for p in probes {
                if !(p > lo && p < hi) {
                    continue;
                }
                let (c, f) = self.count_and_eval(p);
                seen.push((p, c, f));
                moved = true;
                if f >= alpha {
                    (hi, count_hi, f_hi) = (p, c, f);
                } else {
                    (lo, count_lo, f_lo) = (p, c, f);
                }
            }
            if !moved && bisect {
                break;
            }
            bisect = !bisect && hi - lo > 0.5 * width;
        }
        let mut cand = Vec::with_capacity(count_hi - count_lo + 1);
        if let Some(a) = &self.atoms {
            let s = a.values.partition_point(|&v| v <= lo);
            cand.extend(a.values[s..].iter().copied().take_while(|&v| v <= hi));
        }
        if let Some(s) = &self.shifted {
            s.points_between(lo, hi, &mut cand);
        }
        cand.sort_by(f64::total_cmp);
        cand.dedup();
        let i = cand.partition_point(|&c| self.eval(c) < alpha);
        cand.get(i).copied().unwrap_or(hi)
    }

    /// CDF and the density of its smooth part.
    fn eval_with_density(&self, y: f64) -> (f64, f64) {
        let (mut f, mut d) = match &self.gaussian {
            Some(g) => g.eval_with_density(y),
            None => (0.0, 0.0),
        };
        if let Some(a) = &self.atoms {
            f += a.eval(y);
        }
        if let Some(s) = &self.shifted {
            f += s.count_and_eval(y).1;
        }
        if !d.is_finite() {
            d = 0.0;
        }
        (f, d)
    }

    /// Safeguarded Newton iteration inside a bracket that always satisfies
    /// `F(lo) < alpha <= F(hi)`.
    fn invert_smooth(&self, alpha: f64) -> f64 {
        let center = self.mean();
        let scale = self.scale();
        let mut lo = center - 6.0 * scale;
        let mut hi = center + 6.0 * scale;
        for _ in 0..60 {
            if self.eval(lo) < alpha {
                break;
            }
            lo = center - 2.0 * (center - lo);
        }
        for _ in 0..60 {
            if self.eval(hi) >= alpha {
                break;
            }
            hi = center + 2.0 * (hi - center);
        }
        let mut y = lo + 0.5 * (hi - lo);
        let mut step_old = hi - lo;
        let mut step = step_old;
        for _ in 0..400 {
            let (f, d) = self.eval_with_density(y);
            if (f - alpha).abs() <= SMOOTH_TOL && self.atoms.is_none() {
                return y;
            }
            if f >= alpha {
                hi = y;
            } else {
                lo = y;
            }
            if hi - lo <= 1e-12 * scale {
                break;
            }
            let newton = y - (f - alpha) / d;
            let good = d > 0.0 && newton > lo && newton < hi && (2.0 * (f - alpha)).abs() <= (step_old * d).abs();
            step_old = step;
            if good {
                step = newton - y;
                y = newton;
            } else {
                step = 0.5 * (hi - lo);
                y = lo + step;
            }
            if y <= lo || y >= hi {
                break;
            }
        }
        hi
    }
}
