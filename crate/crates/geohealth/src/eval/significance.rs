//! Significance testing for differences between two correlations that were
//! measured on the same n counties.
//!
//! Two variants: a dependent test for two prediction vectors sharing the
//! actual-values variable (the default, since both models are scored against
//! the same ground truth), and the plain independent Fisher z test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::eval::metrics::fisher_z;

/// Which test statistic to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Accounts for the correlation r12 between the two prediction vectors.
    #[default]
    Dependent,
    /// Treats the two correlations as coming from independent samples.
    Independent,
}

/// Significance stars at the .05/.01/.001 levels (strict thresholds).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StarLevel {
    #[default]
    None,
    One,
    Two,
    Three,
}

impl StarLevel {
    pub fn from_p(p: f64) -> Self {
        if p < 0.001 {
            StarLevel::Three
        } else if p < 0.01 {
            StarLevel::Two
        } else if p < 0.05 {
            StarLevel::One
        } else {
            StarLevel::None
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StarLevel::None => "",
            StarLevel::One => "*",
            StarLevel::Two => "**",
            StarLevel::Three => "***",
        }
    }
}

impl std::fmt::Display for StarLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of comparing two correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationComparison {
    pub r1: f64,
    pub r2: f64,
    /// Correlation between the two prediction vectors (ignored by the
    /// independent method).
    pub r12: f64,
    pub n: usize,
    pub method: Method,
    pub z: f64,
    pub p: f64,
    pub stars: StarLevel,
}

fn two_sided_p(z: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Tests r1 against r2 measured on the same n counties. The dependent
/// method is the Steiger form of the Fisher z paired test: with
/// r̄ = (r1+r2)/2,
///   ψ = r12 (1 − 2r̄²) − ½ r̄² (1 − 2r̄² − r12²)
///   s̄ = ψ / (1 − r̄²)²
///   z = (z1 − z2) √(n−3) / √(2 − 2s̄)
/// The independent method is z = (z1 − z2) / √(2/(n−3)).
pub fn compare_correlations(
    r1: f64,
    r2: f64,
    r12: f64,
    n: usize,
    method: Method,
) -> Result<CorrelationComparison> {
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "comparison needs n >= 4, got {n}"
        )));
    }
    if !r12.is_finite() || r12.abs() > 1.0 {
        return Err(Error::InvalidInput(format!("invalid r12 = {r12}")));
    }
    let base = |z: f64, p: f64| CorrelationComparison {
        r1,
        r2,
        r12,
        n,
        method,
        z,
        p,
        stars: StarLevel::from_p(p),
    };
    if r1 == r2 {
        return Ok(base(0.0, 1.0));
    }
    let z1 = fisher_z(r1)?;
    let z2 = fisher_z(r2)?;
    let df = (n - 3) as f64;
    let z = match method {
        Method::Independent => (z1 - z2) / (2.0 / df).sqrt(),
        Method::Dependent => {
            let rbar = (r1 + r2) / 2.0;
            let rbar2 = rbar * rbar;
            let psi = r12 * (1.0 - 2.0 * rbar2) - 0.5 * rbar2 * (1.0 - 2.0 * rbar2 - r12 * r12);
            let sbar = psi / ((1.0 - rbar2) * (1.0 - rbar2));
            let denom = 2.0 - 2.0 * sbar;
            if denom <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "degenerate comparison: r1={r1}, r2={r2}, r12={r12}"
                )));
            }
            (z1 - z2) * df.sqrt() / denom.sqrt()
        }
    };
    let p = two_sided_p(z);
    Ok(base(z, p))
}
