//! f-divergences with their convex conjugates over the nonnegative reals.
//!
//! `conjugate(y) = sup_{x >= 0} (x y - f(x))` and `conjugate_prime(y)` is the
//! maximizing `x`, which is the density ratio recovered from a dual solution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FDivergence {
    /// `f(x) = (x - 1)^2`
    #[default]
    ChiSquared,
    /// `f(x) = x log x`
    Kl,
}

impl FDivergence {
    pub fn f_value(self, x: f64) -> Result<f64> {
        if x < 0.0 || x.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "f-divergence generator needs x >= 0, got {x}"
            )));
        }
        Ok(match self {
            FDivergence::ChiSquared => (x - 1.0).powi(2),
            FDivergence::Kl => {
                if x == 0.0 {
                    0.0
                } else {
                    x * x.ln()
                }
            }
        })
    }

    /// Derivative of the generator, used by the tabular primal solver.
    pub fn f_prime(self, x: f64) -> f64 {
        match self {
            FDivergence::ChiSquared => 2.0 * (x - 1.0),
            FDivergence::Kl => x.max(1e-300).ln() + 1.0,
        }
    }

    pub fn conjugate(self, y: f64) -> f64 {
        match self {
            FDivergence::ChiSquared => {
                if y >= -2.0 {
                    0.25 * y * y + y
                } else {
                    -1.0
                }
            }
            FDivergence::Kl => (y - 1.0).exp(),
        }
    }

    pub fn conjugate_prime(self, y: f64) -> f64 {
        match self {
            FDivergence::ChiSquared => (1.0 + 0.5 * y).max(0.0),
            FDivergence::Kl => (y - 1.0).exp(),
        }
    }

    /// `sum_i base_i * f(ratio_i)`, i.e. `D_f(p || q)` with `ratio = p / q`.
    pub fn divergence_from_ratios(self, ratios: &[f64], base_weights: &[f64]) -> Result<f64> {
        if ratios.len() != base_weights.len() {
            return Err(Error::dims("divergence ratios", base_weights.len(), ratios.len()));
        }
        let mut total = 0.0;
        for (&r, &q) in ratios.iter().zip(base_weights) {
            total += q * self.f_value(r)?;
        }
        Ok(total)
    }

    /// `D_f(p || q)` for two distributions over the same atoms. Atoms with
    /// `q = 0` must also have `p = 0`.
    pub fn divergence(self, p: &[f64], q: &[f64]) -> Result<f64> {
        if p.len() != q.len() {
            return Err(Error::dims("divergence support", q.len(), p.len()));
        }
        let mut total = 0.0;
        for (&pi, &qi) in p.iter().zip(q) {
            if qi > 0.0 {
                total += qi * self.f_value(pi / qi)?;
            } else if pi > 0.0 {
                return Ok(f64::INFINITY);
            }
        }
        Ok(total)
    }

    pub fn name(self) -> &'static str {
        match self {
            FDivergence::ChiSquared => "chi_squared",
            FDivergence::Kl => "kl",
        }
    }
}

impl fmt::Display for FDivergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FDivergence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chi_squared" | "chi2" | "chi-squared" => Ok(FDivergence::ChiSquared),
            "kl" => Ok(FDivergence::Kl),
            other => Err(Error::InvalidArgument(format!("unknown divergence {other:?}"))),
        }
    }
}
