//! Core metrics: Pearson's r, SMAPE, the Fisher r-z transform and its
//! confidence intervals. Generic over the scalar type.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Sample Pearson correlation. Errors when either vector is constant.
pub fn pearson_r<S: Scalar>(a: &ArrayView1<S>, b: &ArrayView1<S>) -> Result<S> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::Dim(format!("vectors of length {n} and {}", b.len())));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "correlation needs at least 2 points, got {n}"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let nf = S::from_usize_c(n);
    let mean_a = a.iter().copied().sum::<S>() / nf;
    let mean_b = b.iter().copied().sum::<S>() / nf;
    let mut cov = S::zero();
    let mut ss_a = S::zero();
    let mut ss_b = S::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let da = *x - mean_a;
        let db = *y - mean_b;
        cov += da * db;
        ss_a += da * da;
        ss_b += db * db;
    }
    if ss_a == S::zero() || ss_b == S::zero() {
        return Err(Error::UndefinedCorrelation(
            "constant vector has no correlation".into(),
        ));
    }
    Ok(cov / (ss_a * ss_b).sqrt())
}

/// Symmetric mean absolute percentage error, in percent:
/// (100/n) Σ |F−A| / ((|A|+|F|)/2). A term with A = F = 0 counts as 0.
/// Range [0, 200].
pub fn smape<S: Scalar>(actual: &ArrayView1<S>, predicted: &ArrayView1<S>) -> Result<S> {
    let n = actual.len();
    if n != predicted.len() {
        return Err(Error::Dim(format!(
            "vectors of length {n} and {}",
            predicted.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("smape of empty vectors".into()));
    }
    if actual.iter().chain(predicted.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smape input".into()));
    }
    let two = S::from_f64_c(2.0);
    let mut total = S::zero();
    for (a, f) in actual.iter().zip(predicted.iter()) {
        let denom = (a.abs() + f.abs()) / two;
        if denom > S::zero() {
            total += (*f - *a).abs() / denom;
        }
    }
    Ok(S::from_f64_c(100.0) * total / S::from_usize_c(n))
}

/// Fisher r-z transform: z = ½ ln((1+r)/(1−r)). Requires |r| < 1.
pub fn fisher_z<S: Scalar>(r: S) -> Result<S> {
    if !r.is_finite() || r.abs() >= S::one() {
        return Err(Error::InvalidInput(format!(
            "fisher z is undefined at r = {r}"
        )));
    }
    let half = S::from_f64_c(0.5);
    Ok(half * ((S::one() + r) / (S::one() - r)).ln())
}

/// 95% confidence interval for a correlation from n samples:
/// tanh(fisher_z(r) ± 1.96/√(n−3)). Degenerate |r| = 1 collapses to a point.
pub fn fisher_ci<S: Scalar>(r: S, n: usize) -> Result<(S, S)> {
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "confidence interval needs n >= 4, got {n}"
        )));
    }
    if r.abs() >= S::one() {
        if r.abs() > S::one() {
            return Err(Error::InvalidInput(format!("|r| = {r} exceeds 1")));
        }
        return Ok((r, r));
    }
    let z = fisher_z(r)?;
    let margin = S::from_f64_c(1.96) / S::from_usize_c(n - 3).sqrt();
    Ok(((z - margin).tanh(), (z + margin).tanh()))
}
