use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Tilting basis `q(t)` of the density ratio model. The first component is
/// always the constant 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    /// `(1, sign(t) sqrt|t|)`
    #[default]
    SignRoot,
    /// `(1, t)`
    Linear,
    /// `(1, t, t^2)`
    Quadratic,
    /// `(1, t, |t|^(1/2))`
    LinearSqrtAbs,
}

impl Basis {
    pub const ALL: [Basis; 4] = [Basis::SignRoot, Basis::Linear, Basis::Quadratic, Basis::LinearSqrtAbs];

    pub fn dim(self) -> usize {
        match self {
            Basis::SignRoot | Basis::Linear => 2,
            Basis::Quadratic | Basis::LinearSqrtAbs => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Basis::SignRoot => "signroot",
            Basis::Linear => "linear",
            Basis::Quadratic => "quadratic",
            Basis::LinearSqrtAbs => "linear-sqrtabs",
        }
    }

    /// Writes `q(t)` into `out[..dim]`.
    #[inline]
    pub fn eval_into(self, t: f64, out: &mut [f64]) {
        out[0] = 1.0;
        match self {
            Basis::SignRoot => out[1] = t.signum() * t.abs().sqrt(),
            Basis::Linear => out[1] = t,
            Basis::Quadratic => {
                out[1] = t;
                out[2] = t * t;
            }
            Basis::LinearSqrtAbs => {
                out[1] = t;
                out[2] = t.abs().sqrt();
            }
        }
    }

    pub fn eval(self, t: f64) -> Vec<f64> {
        let mut q = vec![0.0; self.dim()];
        self.eval_into(t, &mut q);
        q
    }

    /// `theta' q(t)`.
    #[inline]
    pub fn dot(self, theta: &[f64], t: f64) -> f64 {
        let mut q = [0.0; 3];
        self.eval_into(t, &mut q);
        theta.iter().zip(&q).map(|(a, b)| a * b).sum()
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim().to_ascii_lowercase();
        Basis::ALL
            .into_iter()
            .find(|b| b.name() == s || (s == "sign-root" && *b == Basis::SignRoot))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown basis '{s}' (expected one of signroot, linear, quadratic, linear-sqrtabs)"
                ))
            })
    }
}
