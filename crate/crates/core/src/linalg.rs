use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` for symmetric positive (semi)definite `a`, falling back to
/// LU when Cholesky fails. Returns `None` for a numerically singular system.
pub(crate) fn solve_sym(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Reciprocal condition estimate from the symmetric eigenvalues.
pub(crate) fn rcond_sym(a: &DMatrix<f64>) -> f64 {
    let ev = a.clone().symmetric_eigen().eigenvalues;
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// `beta' (1, x)` with an optional leading intercept coefficient.
#[inline]
pub(crate) fn linpred(beta: &[f64], x: &[f64], intercept: bool) -> f64 {
    if intercept {
        beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    } else {
        beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

/// `beta_slopes' (x - xbar)`: intercept-free contrast.
#[inline]
pub(crate) fn contrast(beta: &[f64], x: &[f64], xbar: &[f64], intercept: bool) -> f64 {
    let slopes = if intercept { &beta[1..] } else { beta };
    slopes.iter().zip(x.iter().zip(xbar)).map(|(b, (v, m))| b * (v - m)).sum()
}
