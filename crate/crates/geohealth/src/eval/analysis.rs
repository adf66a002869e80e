//! Per-feature correlation analysis: which individual columns track a
//! health statistic, with 95% confidence intervals.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::metrics::{fisher_ci, pearson_r};
use crate::features::ColumnOrigin;

/// One feature's correlation with a target, with its 95% CI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub name: String,
    /// "U", "I" or "D".
    pub block: String,
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Correlates every column with y and returns the top k by |r|, ties broken
/// by column order. Constant columns cannot be correlated and are skipped;
/// the count of skipped columns is returned alongside.
pub fn feature_correlations(
    matrix: &ArrayView2<f64>,
    origins: &[ColumnOrigin],
    y: &ArrayView1<f64>,
    k: usize,
) -> Result<(Vec<FeatureCorrelation>, usize)> {
    let n = matrix.nrows();
    let mut scored: Vec<(usize, f64)> = Vec::new();
    let mut skipped = 0usize;
    for (j, col) in matrix.columns().into_iter().enumerate() {
        match pearson_r(&col, y) {
            Ok(r) => scored.push((j, r)),
            Err(crate::Error::UndefinedCorrelation(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    scored.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .expect("finite correlations")
            .then(a.0.cmp(&b.0))
    });
    let mut out = Vec::with_capacity(k.min(scored.len()));
    for (j, r) in scored.into_iter().take(k) {
        let (ci_low, ci_high) = fisher_ci(r, n)?;
        let origin = &origins[j];
        out.push(FeatureCorrelation {
            name: origin.name.clone(),
            block: origin.block.clone(),
            r,
            ci_low,
            ci_high,
        });
    }
    Ok((out, skipped))
}
