//! Declarative pipeline configuration. Every analysis constant lives in the
//! TOML file rather than the code, so a run's parameters are auditable from
//! its config alone. The analysis keys are required on purpose: a config
//! that silently fell back to a built-in alpha or threshold would defeat
//! that audit trail.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureBlockSpec;
use crate::ingest::HealthStat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub geo: GeoConfig,
    pub tagger: TaggerConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub images: PathBuf,
    pub health: PathBuf,
    pub demographics: PathBuf,
    /// Optional FIPS -> display name CSV for scatter labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub county_names: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoBackend {
    Fixture,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoConfig {
    pub backend: GeoBackend,
    /// Reverse-geocoding endpoint, remote backend only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Rectangle fixture CSV, fixture backend only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    /// Dotted path to the FIPS field in the remote JSON response.
    #[serde(default = "default_fips_path")]
    pub fips_path: String,
    #[serde(default = "default_geo_rate")]
    pub rate_per_second: f64,
    /// Persist resolved coordinates under the output directory.
    #[serde(default = "default_true")]
    pub cache: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerBackend {
    /// Records already carry machine tags; the tag stage is skipped.
    None,
    Fixture,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggerConfig {
    pub backend: TaggerBackend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// JSONL of canned tagger responses keyed by image id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    /// Credentials file path; the environment variable takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<PathBuf>,
    /// Optional request URL template with an `{id}` placeholder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url_template: Option<String>,
    #[serde(default = "default_tagger_rate")]
    pub rate_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n_top_counties: usize,
    pub images_per_county: usize,
    pub confidence_threshold: f64,
    pub min_county_support: usize,
    pub alpha: f64,
    pub k_folds: usize,
    pub seed: u64,
    /// Feature-set labels like "U", "I+D"; defaults to all six combinations.
    #[serde(default = "default_feature_sets")]
    pub feature_sets: Vec<String>,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<HealthStat>,
    #[serde(default = "default_sweep_thresholds")]
    pub sweep_thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// How many counties get outlier labels in scatter output.
    #[serde(default = "default_label_top")]
    pub label_top: usize,
}

fn default_fips_path() -> String {
    "County.FIPS".to_string()
}

fn default_geo_rate() -> f64 {
    10.0
}

fn default_tagger_rate() -> f64 {
    5.0
}

fn default_true() -> bool {
    true
}

fn default_label_top() -> usize {
    3
}

fn default_feature_sets() -> Vec<String> {
    FeatureBlockSpec::GRID.iter().map(|s| s.to_string()).collect()
}

fn default_statistics() -> Vec<HealthStat> {
    HealthStat::ALL.to_vec()
}

fn default_sweep_thresholds() -> Vec<f64> {
    (1..=12).map(|i| (i * 5) as f64).collect()
}

impl PipelineConfig {
    /// Parses and validates a config file; returns the config together with
    /// the hex SHA-256 of the raw file bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, hash))
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.analysis;
        if a.n_top_counties == 0 || a.images_per_county == 0 || a.min_county_support == 0 {
            return Err(Error::Config(
                "n_top_counties, images_per_county and min_county_support must be positive".into(),
            ));
        }
        if !(0.0..=100.0).contains(&a.confidence_threshold) || !a.confidence_threshold.is_finite() {
            return Err(Error::Config(format!(
                "confidence_threshold {} out of range [0,100]",
                a.confidence_threshold
            )));
        }
        if a.alpha < 0.0 || !a.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be >= 0", a.alpha)));
        }
        if a.k_folds < 2 {
            return Err(Error::Config(format!("k_folds {} must be >= 2", a.k_folds)));
        }
        if a.statistics.is_empty() {
            return Err(Error::Config("statistics list is empty".into()));
        }
        if a.feature_sets.is_empty() {
            return Err(Error::Config("feature_sets list is empty".into()));
        }
        self.feature_specs()?;
        for t in &a.sweep_thresholds {
            if !(0.0..=100.0).contains(t) || !t.is_finite() {
                return Err(Error::Config(format!("sweep threshold {t} out of range [0,100]")));
            }
        }
        match self.geo.backend {
            GeoBackend::Fixture if self.geo.fixture.is_none() => {
                return Err(Error::Config(
                    "geo backend is fixture but geo.fixture is missing".into(),
                ))
            }
            GeoBackend::Remote if self.geo.endpoint.is_none() => {
                return Err(Error::Config(
                    "geo backend is remote but geo.endpoint is missing".into(),
                ))
            }
            _ => {}
        }
        match self.tagger.backend {
            TaggerBackend::Fixture if self.tagger.fixture.is_none() => {
                return Err(Error::Config(
                    "tagger backend is fixture but tagger.fixture is missing".into(),
                ))
            }
            TaggerBackend::Remote if self.tagger.endpoint.is_none() => {
                return Err(Error::Config(
                    "tagger backend is remote but tagger.endpoint is missing".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Parsed feature-set labels, in config order.
    pub fn feature_specs(&self) -> Result<Vec<FeatureBlockSpec>> {
        self.analysis
            .feature_sets
            .iter()
            .map(|label| FeatureBlockSpec::parse(label))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A ready-to-run config for a generated corpus under `dir`.
    pub fn for_synth_corpus(dir: &Path, seed: u64) -> Self {
        PipelineConfig {
            input: InputConfig {
                images: dir.join("images.jsonl"),
                health: dir.join("health.csv"),
                demographics: dir.join("demographics.csv"),
                county_names: None,
            },
            geo: GeoConfig {
                backend: GeoBackend::Fixture,
                endpoint: None,
                fixture: Some(dir.join("geo_cells.csv")),
                fips_path: default_fips_path(),
                rate_per_second: default_geo_rate(),
                cache: true,
            },
            tagger: TaggerConfig {
                backend: TaggerBackend::None,
                endpoint: None,
                fixture: None,
                credentials: None,
                url_template: None,
                rate_per_second: default_tagger_rate(),
            },
            analysis: AnalysisConfig {
                n_top_counties: 100,
                images_per_county: 2000,
                confidence_threshold: 20.0,
                min_county_support: 10,
                alpha: 0.1,
                k_folds: 10,
                seed,
                feature_sets: default_feature_sets(),
                statistics: default_statistics(),
                sweep_thresholds: default_sweep_thresholds(),
            },
            output: OutputConfig {
                dir: dir.join("out"),
                label_top: default_label_top(),
            },
        }
    }
}
