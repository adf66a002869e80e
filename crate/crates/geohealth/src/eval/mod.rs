//! Evaluation: prediction metrics, correlation significance, per-feature
//! correlation analysis and the confidence-threshold sweep.

pub mod analysis;
pub mod metrics;
pub mod significance;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::features::FeatureBlockSpec;
use crate::ingest::HealthStat;

/// One cell of the results grid: a (statistic, feature set) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub statistic: HealthStat,
    pub feature_set: FeatureBlockSpec,
    pub pearson_r: f64,
    pub smape_percent: f64,
    pub n: usize,
}
