use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Basis;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrmOptions {
    pub basis: Basis,
    /// Index of the area whose tilt is fixed at zero.
    pub baseline: usize,
    pub max_iter: usize,
    /// Stop when the gradient max-norm is at most `grad_tol * n`.
    pub grad_tol: f64,
}

impl Default for DrmOptions {
    fn default() -> Self {
        Self { basis: Basis::SignRoot, baseline: 0, max_iter: 200, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub iteration: usize,
    pub objective: f64,
    pub grad_max: f64,
    pub step: f64,
}

/// Pooled residuals and basis values shared by every evaluation of the dual
/// objective.
pub struct DualProblem {
    basis: Basis,
    d2: usize,
    /// Area of each pooled residual.
    area: Vec<usize>,
    /// `q(eps_i)`, row-major `n x d2`.
    q: Vec<f64>,
    log_rho: Vec<f64>,
    /// `sum_{j in area k} q(eps_kj)`, row-major `(m+1) x d2`.
    own: Vec<f64>,
    n_k: Vec<usize>,
}

pub struct DualEval {
    pub value: f64,
    /// Gradient for every area, row-major `(m+1) x d2`.
    pub grad: Vec<f64>,
    /// Hessian over all `(m+1) d2` coordinates when requested.
    pub hess: Option<DMatrix<f64>>,
}

impl DualProblem {
    pub fn new(residuals: &[Vec<f64>], basis: Basis) -> Result<Self> {
        let groups = residuals.len();
        if groups < 2 {
            return Err(Error::Validation("the density ratio model needs at least two areas".into()));
        }
        if let Some(k) = residuals.iter().position(|r| r.is_empty()) {
            return Err(Error::Validation(format!("area index {k} has no residuals")));
        }
        let d2 = basis.dim();
        let n: usize = residuals.iter().map(Vec::len).sum();
        let mut area = Vec::with_capacity(n);
        let mut q = vec![0.0; n * d2];
        let mut own = vec![0.0; groups * d2];
        let mut i = 0;
        for (k, rs) in residuals.iter().enumerate() {
            for &e in rs {
                if !e.is_finite() {
                    return Err(Error::Validation("non-finite residual".into()));
                }
                basis.eval_into(e, &mut q[i * d2..(i + 1) * d2]);
                for c in 0..d2 {
                    own[k * d2 + c] += q[i * d2 + c];
                }
                area.push(k);
                i += 1;
            }
        }
        let mut distinct: Vec<f64> = residuals.iter().flatten().copied().collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < d2 + 1 {
            return Err(Error::Degenerate(format!(
                "{} distinct residual values, the {basis} basis needs at least {}",
                distinct.len(),
                d2 + 1
            )));
        }
        let n_k: Vec<usize> = residuals.iter().map(Vec::len).collect();
        let log_rho = n_k.iter().map(|&c| (c as f64 / n as f64).ln()).collect();
        Ok(Self { basis, d2, area, q, log_rho, own, n_k })
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn num_groups(&self) -> usize {
        self.n_k.len()
    }

    pub fn n(&self) -> usize {
        self.area.len()
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn q(&self, i: usize) -> &[f64] {
        &self.q[i * self.d2..(i + 1) * self.d2]
    }

    /// `log sum_r rho_r exp(theta_r' q(eps_i))` for every pooled residual, and
    /// optionally the posterior weights `h_r(eps_i)` (row-major `n x (m+1)`).
    fn log_denominators(&self, theta: &[f64], h: Option<&mut Vec<f64>>) -> Vec<f64> {
        let g = self.num_groups();
        let d2 = self.d2;
        let mut a = vec![0.0; g];
        let mut out = Vec::with_capacity(self.n());
        let mut hbuf = h;
        if let Some(h) = hbuf.as_deref_mut() {
            h.clear();
            h.reserve(self.n() * g);
        }
        for i in 0..self.n() {
            let qi = self.q(i);
            let mut mx = f64::NEG_INFINITY;
            for r in 0..g {
                let t = &theta[r * d2..(r + 1) * d2];
                a[r] = self.log_rho[r] + t.iter().zip(qi).map(|(x, y)| x * y).sum::<f64>();
                mx = mx.max(a[r]);
            }
            for v in a.iter_mut() {
                *v = (*v - mx).exp();
            }
            let s: f64 = a.iter().sum();
            let lse = mx + s.ln();
            if let Some(h) = hbuf.as_deref_mut() {
                h.extend(a.iter().map(|v| v / s));
            }
            out.push(lse);
        }
        out
    }

    /// The dual empirical log-likelihood
    /// `-sum_i log sum_r rho_r exp(theta_r' q_i) + sum_k sum_{j in k} theta_k' q_kj`,
    /// with `theta` row-major `(m+1) x d2`.
    pub fn value(&self, theta: &[f64]) -> f64 {
        let lse = self.log_denominators(theta, None);
        let own: f64 = theta.iter().zip(&self.own).map(|(a, b)| a * b).sum();
        own - lse.iter().sum::<f64>()
    }

    pub fn evaluate(&self, theta: &[f64], hessian: bool) -> DualEval {
        let g = self.num_groups();
        let d2 = self.d2;
        let mut h = Vec::new();
        let lse = self.log_denominators(theta, Some(&mut h));
        let own: f64 = theta.iter().zip(&self.own).map(|(a, b)| a * b).sum();
        let value = own - lse.iter().sum::<f64>();
        let n = self.n();
        let dim = g * d2;
        // Row i of `v` is h_i (x) q_i; the gradient subtracts its column sums
        // and the Hessian is v'v - blockdiag(sum_i h_ir q_i q_i').
        let mut v = DMatrix::<f64>::zeros(n, dim);
        {
            let vs = v.as_mut_slice();
            for i in 0..n {
                let qi = self.q(i);
                let hi = &h[i * g..(i + 1) * g];
                for r in 0..g {
                    for c in 0..d2 {
                        vs[(r * d2 + c) * n + i] = hi[r] * qi[c];
                    }
                }
            }
        }
        let grad: Vec<f64> = (0..dim).map(|j| self.own[j] - v.column(j).sum()).collect();
        let hess = hessian.then(|| {
            let mut m = v.transpose() * &v;
            let mut block = vec![0.0; g * d2 * d2];
            for i in 0..n {
                let qi = self.q(i);
                for r in 0..g {
                    let hr = h[i * g + r];
                    let blk = &mut block[r * d2 * d2..(r + 1) * d2 * d2];
                    for a in 0..d2 {
                        for b in 0..d2 {
                            blk[a * d2 + b] += hr * qi[a] * qi[b];
                        }
                    }
                }
            }
            for r in 0..g {
                for a in 0..d2 {
                    for b in 0..d2 {
                        m[(r * d2 + a, r * d2 + b)] -= block[(r * d2 + a) * d2 + b];
                    }
                }
            }
            m
        });
        DualEval { value, grad, hess }
    }

    /// Baseline weights `p_i = n^-1 / sum_r rho_r exp(theta_r' q_i)`.
    pub fn base_weights(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n() as f64;
        self.log_denominators(theta, None).into_iter().map(|l| (-l).exp() / n).collect()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.n_k
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad_max: f64,
    pub iterations: usize,
    pub trace: Vec<NewtonStep>,
}

fn max_abs_free(grad: &[f64], free: &[usize]) -> f64 {
    free.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max)
}

/// Damped Newton ascent on the concave dual objective with the baseline
/// area's tilt pinned at zero.
///
/// When the areas are separable in the basis space the objective keeps
/// increasing along a ray and the gradient vanishes only at infinity; such
/// fits are reported as non-convergence rather than returned.
pub fn maximize_dual(problem: &DualProblem, opts: &DrmOptions, start: Option<&[f64]>) -> Result<DualSolution> {
    let sol = newton(problem, opts, start)?;
    let norm = sol.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    if norm > 1.0 {
        let doubled: Vec<f64> = sol.theta.iter().map(|t| 2.0 * t).collect();
        let v2 = problem.value(&doubled);
        if v2 >= sol.value - 1e-12 * sol.value.abs().max(1.0) {
            return Err(non_convergence(
                sol.iterations,
                format!("objective still increases along the ray through theta (|theta| = {norm:.3e}); areas are separable in the basis space"),
                &sol.trace,
            ));
        }
    }
    Ok(sol)
}

fn newton(problem: &DualProblem, opts: &DrmOptions, start: Option<&[f64]>) -> Result<DualSolution> {
    let g = problem.num_groups();
    let d2 = problem.d2();
    if opts.baseline >= g {
        return Err(Error::Config(format!("baseline index {} out of range for {g} areas", opts.baseline)));
    }
    let dim = g * d2;
    let free: Vec<usize> = (0..dim).filter(|i| i / d2 != opts.baseline).collect();
    let tol = opts.grad_tol * problem.n() as f64;
    // Once the tolerance is met, a few more Newton steps are taken while they
    // still improve the objective so that the weight constraints hold tightly.
    let polish_tol = 1e-4 * tol;

    let mut theta = vec![0.0; dim];
    if let Some(s) = start.filter(|s| s.len() == dim && s.iter().all(|v| v.is_finite())) {
        let base = &s[opts.baseline * d2..(opts.baseline + 1) * d2];
        for (i, t) in theta.iter_mut().enumerate() {
            *t = s[i] - base[i % d2];
        }
        let warm = problem.value(&theta);
        // A stale start can be worse than the origin; keep whichever is higher.
        if !warm.is_finite() || warm < problem.value(&vec![0.0; dim]) {
            theta.iter_mut().for_each(|t| *t = 0.0);
        }
    }

    let mut trace = Vec::new();
    let mut polishing = 0;
    for iteration in 0..=opts.max_iter {
        let ev = problem.evaluate(&theta, true);
        let gmax = max_abs_free(&ev.grad, &free);
        trace.push(NewtonStep { iteration, objective: ev.value, grad_max: gmax, step: 0.0 });
        if !ev.value.is_finite() {
            break;
        }
        let converged = gmax <= tol;
        if converged && (gmax <= polish_tol || polishing >= 3) {
            return Ok(DualSolution { theta, value: ev.value, grad_max: gmax, iterations: iteration, trace });
        }
        if iteration == opts.max_iter {
            break;
        }
        let hess = ev.hess.expect("hessian requested");
        let nh = DMatrix::from_fn(free.len(), free.len(), |a, b| -hess[(free[a], free[b])]);
        let gv = DVector::from_iterator(free.len(), free.iter().map(|&i| ev.grad[i]));
        let dir = newton_direction(&nh, &gv);
        let slope = gv.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        let halvings = if converged { 2 } else { 60 };
        for _ in 0..halvings {
            let mut cand = theta.clone();
            for (a, &i) in free.iter().enumerate() {
                cand[i] += t * dir[a];
            }
            let v = problem.value(&cand);
            if v.is_finite() && v >= ev.value + 1e-4 * t * slope {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                if converged {
                    if v < ev.value {
                        return Ok(DualSolution { theta, value: ev.value, grad_max: gmax, iterations: iteration, trace });
                    }
                    polishing += 1;
                }
                theta = cand;
                trace.last_mut().unwrap().step = t;
            }
            None if converged => {
                return Ok(DualSolution { theta, value: ev.value, grad_max: gmax, iterations: iteration, trace });
            }
            None => {
                return Err(non_convergence(
                    iteration,
                    format!("line search failed at gradient max-norm {gmax:e}"),
                    &trace,
                ))
            }
        }
    }
    let last = trace.last().map(|s| s.grad_max).unwrap_or(f64::NAN);
    Err(non_convergence(
        opts.max_iter,
        format!("gradient max-norm {last:e} above tolerance {tol:e}; areas may be separable in the basis space"),
        &trace,
    ))
}

fn newton_direction(nh: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = nh.clone().cholesky() {
        let d = ch.solve(g);
        if d.iter().all(|v| v.is_finite()) {
            return d;
        }
    }
    // Levenberg-style ridge when the Hessian is numerically singular.
    let scale = nh.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut lambda = 1e-10 * scale;
    while lambda < 1e10 * scale {
        let mut m = nh.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        lambda *= 100.0;
    }
    g.clone()
}

fn non_convergence(iterations: usize, detail: String, trace: &[NewtonStep]) -> Error {
    Error::NonConvergence {
        what: "dual empirical likelihood",
        iterations,
        detail,
        trace: trace
            .iter()
            .map(|s| format!("iter {}: objective {:.12e}, |grad| {:.3e}, step {}", s.iteration, s.objective, s.grad_max, s.step))
            .collect(),
    }
}
