//! Global confidence-threshold selection: rerun the machine-tag feature
//! pipeline at each candidate threshold and keep the one maximizing the
//! macro-averaged correlation over the evaluated health statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::pearson_r;
use crate::features::{build_count_matrix, build_vocabulary, TagSource};
use crate::ingest::{FipsCode, HealthStat, HealthStatTable, ImageRecord};
use crate::model::{cross_validate, kfold_split, RidgeSpec};
use crate::tagging::ConfidenceThreshold;

/// Fixed inputs of a sweep.
pub struct SweepParams<'a> {
    pub records: &'a [ImageRecord],
    pub counties: &'a [FipsCode],
    pub health: &'a HealthStatTable,
    pub statistics: &'a [HealthStat],
    pub min_county_support: usize,
    pub alpha: f64,
    pub k_folds: usize,
    pub seed: u64,
}

/// One threshold's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    /// Vocabulary size after the confidence and support filters.
    pub surviving_tags: usize,
    /// Pooled r per statistic, in the order of `SweepParams::statistics`.
    pub per_stat_r: Vec<f64>,
    /// Unweighted mean of the per-statistic correlations.
    pub macro_r: f64,
}

/// The chosen threshold plus the full per-threshold table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub chosen: f64,
    pub rows: Vec<SweepRow>,
}

/// Runs the machine-tag pipeline at every threshold. Ties on macro-averaged
/// r go to the earliest threshold in the list.
pub fn sweep_confidence_threshold(
    params: &SweepParams,
    thresholds: &[f64],
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("no thresholds to sweep".into()));
    }
    if params.statistics.is_empty() {
        return Err(Error::InvalidInput("no statistics to evaluate".into()));
    }
    let n = params.counties.len();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let threshold = ConfidenceThreshold::new(t)?;
        let context = |e: Error| Error::InvalidInput(format!("threshold {t}: {e}"));
        let vocab = build_vocabulary(
            params.records,
            TagSource::I,
            threshold,
            params.min_county_support,
        )
        .map_err(context)?;
        let mut counts = build_count_matrix(
            params.records,
            &vocab,
            params.counties,
            TagSource::I,
            threshold,
        );
        counts.normalize();
        let spec = RidgeSpec::new(params.alpha, true)?;
        let folds = kfold_split(n, params.k_folds, params.seed).map_err(context)?;
        let mut per_stat_r = Vec::with_capacity(params.statistics.len());
        for stat in params.statistics {
            let stat_context = |e: Error| {
                Error::InvalidInput(format!("threshold {t}, statistic {stat}: {e}"))
            };
            let y = ndarray::Array1::from(
                params
                    .health
                    .values_for(*stat, params.counties)
                    .map_err(stat_context)?,
            );
            let cv = cross_validate(&counts.matrix.view(), &y.view(), &spec, &folds)
                .map_err(stat_context)?;
            let r = pearson_r(&y.view(), &cv.pooled.view()).map_err(stat_context)?;
            per_stat_r.push(r);
        }
        let macro_r = per_stat_r.iter().sum::<f64>() / per_stat_r.len() as f64;
        rows.push(SweepRow {
            threshold: t,
            surviving_tags: vocab.len(),
            per_stat_r,
            macro_r,
        });
    }
    let mut chosen = rows[0].threshold;
    let mut best = rows[0].macro_r;
    for row in &rows[1..] {
        if row.macro_r > best {
            best = row.macro_r;
            chosen = row.threshold;
        }
    }
    Ok(SweepResult { chosen, rows })
}
