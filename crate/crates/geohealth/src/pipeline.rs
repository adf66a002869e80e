//! Stage orchestration over persisted artifacts. Each stage reads the
//! previous stage's artifact from the output directory, verifies a content
//! stamp (SHA-256 over its inputs and the relevant config knobs) and skips
//! recomputation when nothing changed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{GeoBackend, PipelineConfig, TaggerBackend};
use crate::error::{Error, Result};
use crate::eval::analysis::{feature_correlations, FeatureCorrelation};
use crate::eval::metrics::{pearson_r, smape};
use crate::eval::significance::{compare_correlations, CorrelationComparison, Method};
use crate::eval::sweep::{sweep_confidence_threshold, SweepParams, SweepResult};
use crate::eval::EvalResult;
use crate::features::{
    build_count_matrix, build_vocabulary, combine_blocks, read_matrix, sample_per_county,
    select_top_counties, standardize_demographics, write_matrix, CountyTagMatrix,
    FeatureBlockSpec, TagSource, TagVocabulary,
};
use crate::geo::{annotate_dataset, CachedResolver, CountyResolver, RectangleLookup, RemoteResolver, RetryPolicy};
use crate::ingest::{
    read_county_names, read_demographics_csv, read_health_csv, read_images, write_error_report,
    write_images, FipsCode, HealthStat,
};
use crate::model::{cross_validate, kfold_split, RidgeSpec};
use crate::report::{
    emit_feature_chart, emit_results_grid, emit_scatter, emit_scatter_svg, scatter_data,
    ResultsGrid,
};
use crate::synth::{generate, SynthSpec};
use crate::tagging::{annotate_tags, load_credentials, ConfidenceThreshold, FixtureTagger, RemoteTagger, Tagger};

/// Features ranked in the per-statistic correlation chart.
const FEATURE_CHART_TOP: usize = 10;

fn worker_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4).min(8)
}

/// A loaded config bound to an output directory, with flag overrides applied.
pub struct Pipeline {
    config: PipelineConfig,
    config_sha256: String,
    specs: Vec<FeatureBlockSpec>,
}

/// Everything evaluate persists for the report stage.
#[derive(Serialize, Deserialize)]
pub struct EvalBundle {
    pub statistics: Vec<HealthStat>,
    pub feature_sets: Vec<FeatureBlockSpec>,
    pub n_counties: usize,
    pub results: Vec<EvalResult>,
    pub comparisons: Vec<ComparisonRecord>,
}

/// Both paired-test variants, side by side.
#[derive(Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub statistic: HealthStat,
    pub feature_set: FeatureBlockSpec,
    pub baseline: FeatureBlockSpec,
    pub dependent: CorrelationComparison,
    pub independent: CorrelationComparison,
}

#[derive(Serialize, Deserialize)]
pub struct StatFeatureCorrelations {
    pub statistic: HealthStat,
    pub feature_set: FeatureBlockSpec,
    pub top: Vec<FeatureCorrelation>,
    pub skipped_constant_columns: usize,
}

impl Pipeline {
    pub fn new(
        mut config: PipelineConfig,
        config_sha256: String,
        seed: Option<u64>,
        output: Option<PathBuf>,
    ) -> Result<Self> {
        if let Some(seed) = seed {
            config.analysis.seed = seed;
        }
        if let Some(dir) = output {
            config.output.dir = dir;
        }
        let specs = config.feature_specs()?;
        Ok(Pipeline { config, config_sha256, specs })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output.dir.join(name)
    }

    fn ensure_output_dirs(&self) -> Result<()> {
        for sub in ["", "features", "eval", "report", "stamps"] {
            let dir = self.config.output.dir.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        Ok(())
    }

    /// The machine-tag artifact featurize and sweep read: tagged when the
    /// tag stage ran, otherwise geotagged.
    fn tag_artifact(&self) -> PathBuf {
        let tagged = self.out("tagged.jsonl");
        if tagged.exists() {
            tagged
        } else {
            self.out("geotagged.jsonl")
        }
    }

    fn require(&self, path: &Path, produced_by: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing {}; run the {produced_by} stage first",
                path.display()
            )))
        }
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.out(&format!("stamps/{stage}.stamp"))
    }

    /// True when the stage's stamp matches and all its artifacts exist.
    fn is_cached(&self, stage: &str, stamp: &str, artifacts: &[PathBuf]) -> bool {
        if !artifacts.iter().all(|p| p.exists()) {
            return false;
        }
        fs::read_to_string(self.stamp_path(stage)).map(|s| s == stamp).unwrap_or(false)
    }

    fn write_stamp(&self, stage: &str, stamp: &str) -> Result<()> {
        let path = self.stamp_path(stage);
        fs::write(&path, stamp).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn write_run_meta(&self) -> Result<()> {
        let meta = serde_json::json!({
            "config_sha256": self.config_sha256,
            "seed": self.config.analysis.seed,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "assumptions": run_assumptions(),
        });
        let path = self.out("run_meta.json");
        fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&meta).unwrap()))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn run_ingest(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let input = &self.config.input;
        let stamp = stamp_of(&[
            ("images", file_sha256(&input.images)?),
            ("health", file_sha256(&input.health)?),
            ("demographics", file_sha256(&input.demographics)?),
        ]);
        let artifacts = [
            self.out("ingested.jsonl"),
            self.out("ingest_errors.jsonl"),
            self.out("ingest_manifest.json"),
        ];
        if self.is_cached("ingest", &stamp, &artifacts) {
            println!("ingest: artifacts up to date, skipping");
            return Ok(());
        }
        let dataset = read_images(&input.images)?;
        read_health_csv(&input.health)?;
        read_demographics_csv(&input.demographics)?;
        write_images(&artifacts[0], &dataset.records)?;
        write_error_report(&artifacts[1], &dataset.errors)?;
        let manifest = serde_json::to_string_pretty(&dataset.manifest).unwrap();
        fs::write(&artifacts[2], format!("{manifest}\n"))
            .map_err(|e| Error::io(artifacts[2].display().to_string(), e))?;
        self.write_stamp("ingest", &stamp)?;
        println!(
            "ingest: {} records valid, {} quarantined",
            dataset.records.len(),
            dataset.errors.len()
        );
        Ok(())
    }

    pub fn run_geotag(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let input = self.out("ingested.jsonl");
        self.require(&input, "ingest")?;
        let geo = &self.config.geo;
        let stamp = stamp_of(&[
            ("ingested", file_sha256(&input)?),
            ("geo", toml::to_string(geo).unwrap_or_default()),
        ]);
        let artifacts = [self.out("geotagged.jsonl"), self.out("geotag_report.json")];
        if self.is_cached("geotag", &stamp, &artifacts) {
            println!("geotag: artifacts up to date, skipping");
            return Ok(());
        }

        let mut records = read_images(&input)?.records;
        let (report, remote_calls, cache_hits, failures) = match geo.backend {
            GeoBackend::Fixture => {
                let fixture = geo.fixture.as_ref().expect("validated");
                let lookup = RectangleLookup::from_path(fixture)?;
                let (report, failures) = annotate_dataset(&mut records, &lookup, worker_threads());
                (report, 0, 0, failures)
            }
            GeoBackend::Remote => {
                let endpoint = geo.endpoint.as_ref().expect("validated");
                let resolver = RemoteResolver::new(
                    endpoint.clone(),
                    geo.fips_path.clone(),
                    RetryPolicy::default(),
                    geo.rate_per_second,
                )?;
                if geo.cache {
                    let cached = CachedResolver::with_file(resolver, &self.out("geo_cache.jsonl"))?;
                    let (report, failures) =
                        annotate_dataset(&mut records, &cached, worker_threads());
                    cached.flush()?;
                    (report, cached.remote_calls(), cached.cache_hits(), failures)
                } else {
                    let (report, failures) =
                        annotate_dataset(&mut records, &resolver, worker_threads());
                    (report, resolver.remote_calls(), 0, failures)
                }
            }
        };
        if !failures.is_empty() {
            let (id, msg) = &failures[0];
            return Err(Error::ResolutionFailed(format!(
                "{} of {} coordinates unresolved; first failure {id}: {msg}",
                failures.len(),
                records.len()
            )));
        }
        write_images(&artifacts[0], &records)?;
        let summary = serde_json::json!({
            "resolved": report.resolved,
            "no_county": report.no_county,
            "failed": report.failed,
            "remote_calls": remote_calls,
            "cache_hits": cache_hits,
        });
        fs::write(&artifacts[1], format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))
            .map_err(|e| Error::io(artifacts[1].display().to_string(), e))?;
        self.write_stamp("geotag", &stamp)?;
        println!(
            "geotag: {} resolved, {} without county, {} remote calls, {} cache hits",
            report.resolved, report.no_county, remote_calls, cache_hits
        );
        Ok(())
    }

    pub fn run_tag(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let tagger_cfg = &self.config.tagger;
        if tagger_cfg.backend == TaggerBackend::None {
            println!("tag: backend none, records keep their existing machine tags");
            return Ok(());
        }
        let input = self.out("geotagged.jsonl");
        self.require(&input, "geotag")?;
        let stamp = stamp_of(&[
            ("geotagged", file_sha256(&input)?),
            ("tagger", toml::to_string(tagger_cfg).unwrap_or_default()),
        ]);
        let artifacts = [self.out("tagged.jsonl"), self.out("tag_report.json")];
        if self.is_cached("tag", &stamp, &artifacts) {
            println!("tag: artifacts up to date, skipping");
            return Ok(());
        }

        let records = read_images(&input)?.records;
        let tagger: Box<dyn Tagger> = match tagger_cfg.backend {
            TaggerBackend::Fixture => {
                let fixture = tagger_cfg.fixture.as_ref().expect("validated");
                Box::new(FixtureTagger::from_path(fixture)?)
            }
            TaggerBackend::Remote => {
                let endpoint = tagger_cfg.endpoint.as_ref().expect("validated");
                let auth = load_credentials(tagger_cfg.credentials.as_deref())?;
                Box::new(RemoteTagger::new(
                    endpoint.clone(),
                    auth,
                    tagger_cfg.url_template.clone(),
                    RetryPolicy::default(),
                    tagger_cfg.rate_per_second,
                )?)
            }
            TaggerBackend::None => unreachable!(),
        };
        let (records, report, failures) = annotate_tags(records, tagger.as_ref(), worker_threads())?;
        write_images(&artifacts[0], &records)?;
        let summary = serde_json::json!({
            "tagged": report.tagged,
            "gone_kept": report.gone_kept,
            "gone_dropped": report.gone_dropped,
            "failed": report.failed,
            "failures": failures.iter().take(20).map(|(id, m)| format!("{id}: {m}")).collect::<Vec<_>>(),
        });
        fs::write(&artifacts[1], format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))
            .map_err(|e| Error::io(artifacts[1].display().to_string(), e))?;
        self.write_stamp("tag", &stamp)?;
        println!(
            "tag: {} tagged, {} gone kept, {} gone dropped, {} failed",
            report.tagged, report.gone_kept, report.gone_dropped, report.failed
        );
        Ok(())
    }

    pub fn run_featurize(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let input = self.tag_artifact();
        self.require(&input, "geotag")?;
        let a = &self.config.analysis;
        let stamp = stamp_of(&[
            ("records", file_sha256(&input)?),
            ("demographics", file_sha256(&self.config.input.demographics)?),
            ("n_top_counties", a.n_top_counties.to_string()),
            ("images_per_county", a.images_per_county.to_string()),
            ("confidence_threshold", a.confidence_threshold.to_string()),
            ("min_county_support", a.min_county_support.to_string()),
            ("seed", a.seed.to_string()),
        ]);
        let artifacts = [
            self.out("features/U.mat"),
            self.out("features/I.mat"),
            self.out("features/D.mat"),
            self.out("features/sample_report.json"),
        ];
        if self.is_cached("featurize", &stamp, &artifacts) {
            println!("featurize: artifacts up to date, skipping");
            return Ok(());
        }

        let records = read_images(&input)?.records;
        let counties = select_top_counties(&records, a.n_top_counties)?;
        let (sampled, shortfalls) =
            sample_per_county(&records, &counties, a.images_per_county, a.seed);
        let threshold = ConfidenceThreshold::new(a.confidence_threshold)?;

        let u_vocab = build_vocabulary(&sampled, TagSource::U, threshold, a.min_county_support)?;
        let mut u = build_count_matrix(&sampled, &u_vocab, &counties, TagSource::U, threshold);
        u.normalize();
        write_matrix(&artifacts[0], &u)?;

        let i_vocab = build_vocabulary(&sampled, TagSource::I, threshold, a.min_county_support)?;
        let mut i = build_count_matrix(&sampled, &i_vocab, &counties, TagSource::I, threshold);
        i.normalize();
        write_matrix(&artifacts[1], &i)?;

        let demo_table = read_demographics_csv(&self.config.input.demographics)?;
        let d_matrix = standardize_demographics(&demo_table, &counties)?;
        let d = CountyTagMatrix {
            counties: counties.clone(),
            vocab: TagVocabulary::from_columns(demo_table.columns.clone(), counties.len()),
            matrix: d_matrix,
            normalized: false,
            skipped: 0,
        };
        write_matrix(&artifacts[2], &d)?;

        let summary = serde_json::json!({
            "counties": counties.len(),
            "sampled_images": sampled.len(),
            "user_vocabulary": u_vocab.len(),
            "machine_vocabulary": i_vocab.len(),
            "shortfalls": shortfalls,
        });
        fs::write(&artifacts[3], format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))
            .map_err(|e| Error::io(artifacts[3].display().to_string(), e))?;
        self.write_stamp("featurize", &stamp)?;
        println!(
            "featurize: {} counties, {} sampled images, vocab U={} I={} D={}",
            counties.len(),
            sampled.len(),
            u_vocab.len(),
            i_vocab.len(),
            demo_table.columns.len()
        );
        Ok(())
    }

    pub fn run_evaluate(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let a = &self.config.analysis;
        let inputs = [
            self.out("features/U.mat"),
            self.out("features/I.mat"),
            self.out("features/D.mat"),
        ];
        for p in &inputs {
            self.require(p, "featurize")?;
        }
        let stamp = stamp_of(&[
            ("u", file_sha256(&inputs[0])?),
            ("i", file_sha256(&inputs[1])?),
            ("d", file_sha256(&inputs[2])?),
            ("health", file_sha256(&self.config.input.health)?),
            ("alpha", a.alpha.to_string()),
            ("k_folds", a.k_folds.to_string()),
            ("seed", a.seed.to_string()),
            ("feature_sets", a.feature_sets.join(",")),
            ("statistics", a.statistics.iter().map(|s| s.id()).collect::<Vec<_>>().join(",")),
        ]);
        let artifacts = [
            self.out("eval/results.json"),
            self.out("eval/predictions.csv"),
            self.out("eval/feature_correlations.json"),
        ];
        if self.is_cached("evaluate", &stamp, &artifacts) {
            println!("evaluate: artifacts up to date, skipping");
            return Ok(());
        }

        let u = read_matrix(&inputs[0])?;
        let i = read_matrix(&inputs[1])?;
        let d = read_matrix(&inputs[2])?;
        let counties = u.counties.clone();
        if i.counties != counties || d.counties != counties {
            return Err(Error::Validation(
                "feature matrices disagree on county order; rerun featurize".into(),
            ));
        }
        let n = counties.len();
        let health = read_health_csv(&self.config.input.health)?;
        let folds = kfold_split(n, a.k_folds, a.seed)?;
        let ridge = RidgeSpec::new(a.alpha, true)?;
        let d_block = (&d.matrix, d.vocab.tags(), d.counties.as_slice());

        let mut results = Vec::new();
        let mut predictions: BTreeMap<(HealthStat, FeatureBlockSpec), Array1<f64>> =
            BTreeMap::new();
        let mut actuals: BTreeMap<HealthStat, Array1<f64>> = BTreeMap::new();
        let mut charts = Vec::new();
        let largest = self
            .specs
            .iter()
            .copied()
            .max_by_key(|s| {
                (s.user as usize) * u.vocab.len()
                    + (s.imagga as usize) * i.vocab.len()
                    + (s.demographics as usize) * d.vocab.len()
            })
            .expect("validated nonempty");

        for stat in &a.statistics {
            let y = Array1::from(health.values_for(*stat, &counties)?);
            for spec in &self.specs {
                let context = |e: Error| {
                    Error::Validation(format!("statistic {stat}, feature set {spec}: {e}"))
                };
                let fs = combine_blocks(*spec, Some(&u), Some(&i), Some(d_block))
                    .map_err(context)?;
                let cv = cross_validate(&fs.matrix.view(), &y.view(), &ridge, &folds)
                    .map_err(context)?;
                let r = pearson_r(&y.view(), &cv.pooled.view()).map_err(context)?;
                let s = smape(&y.view(), &cv.pooled.view()).map_err(context)?;
                results.push(EvalResult {
                    statistic: *stat,
                    feature_set: *spec,
                    pearson_r: r,
                    smape_percent: s,
                    n,
                });
                predictions.insert((*stat, *spec), cv.pooled);
                if *spec == largest {
                    let (top, skipped) =
                        feature_correlations(&fs.matrix.view(), &fs.origins, &y.view(), FEATURE_CHART_TOP)
                            .map_err(context)?;
                    charts.push(StatFeatureCorrelations {
                        statistic: *stat,
                        feature_set: *spec,
                        top,
                        skipped_constant_columns: skipped,
                    });
                }
            }
            actuals.insert(*stat, y);
        }

        let baseline = FeatureBlockSpec::D;
        let mut comparisons = Vec::new();
        if self.specs.contains(&baseline) {
            for stat in &a.statistics {
                let base_pred = &predictions[&(*stat, baseline)];
                let base_r = results
                    .iter()
                    .find(|c| c.statistic == *stat && c.feature_set == baseline)
                    .map(|c| c.pearson_r)
                    .expect("baseline evaluated");
                for spec in &self.specs {
                    if *spec == baseline {
                        continue;
                    }
                    let pred = &predictions[&(*stat, *spec)];
                    let r = results
                        .iter()
                        .find(|c| c.statistic == *stat && c.feature_set == *spec)
                        .map(|c| c.pearson_r)
                        .expect("cell evaluated");
                    let context = |e: Error| {
                        Error::Validation(format!(
                            "comparison {stat} {spec} vs {baseline}: {e}"
                        ))
                    };
                    let r12 = pearson_r(&pred.view(), &base_pred.view()).map_err(context)?;
                    let dependent = compare_correlations(r, base_r, r12, n, Method::Dependent)
                        .map_err(context)?;
                    let independent = compare_correlations(r, base_r, r12, n, Method::Independent)
                        .map_err(context)?;
                    comparisons.push(ComparisonRecord {
                        statistic: *stat,
                        feature_set: *spec,
                        baseline,
                        dependent,
                        independent,
                    });
                }
            }
        }

        let bundle = EvalBundle {
            statistics: a.statistics.clone(),
            feature_sets: self.specs.clone(),
            n_counties: n,
            results,
            comparisons,
        };
        fs::write(
            &artifacts[0],
            format!("{}\n", serde_json::to_string_pretty(&bundle).unwrap()),
        )
        .map_err(|e| Error::io(artifacts[0].display().to_string(), e))?;

        let file = File::create(&artifacts[1])
            .map_err(|e| Error::io(artifacts[1].display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "statistic,feature_set,fips,actual,predicted")
            .map_err(|e| Error::io(artifacts[1].display().to_string(), e))?;
        for ((stat, spec), pred) in &predictions {
            let y = &actuals[stat];
            for (row, fips) in counties.iter().enumerate() {
                writeln!(w, "{},{},{},{},{}", stat.id(), spec, fips, y[row], pred[row])
                    .map_err(|e| Error::io(artifacts[1].display().to_string(), e))?;
            }
        }
        w.flush().map_err(|e| Error::io(artifacts[1].display().to_string(), e))?;

        fs::write(
            &artifacts[2],
            format!("{}\n", serde_json::to_string_pretty(&charts).unwrap()),
        )
        .map_err(|e| Error::io(artifacts[2].display().to_string(), e))?;
        self.write_stamp("evaluate", &stamp)?;
        println!(
            "evaluate: {} cells over {} statistics x {} feature sets",
            bundle.results.len(),
            a.statistics.len(),
            self.specs.len()
        );
        Ok(())
    }

    pub fn run_sweep(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let input = self.tag_artifact();
        self.require(&input, "geotag")?;
        let a = &self.config.analysis;
        let stamp = stamp_of(&[
            ("records", file_sha256(&input)?),
            ("health", file_sha256(&self.config.input.health)?),
            ("thresholds", a.sweep_thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")),
            ("n_top_counties", a.n_top_counties.to_string()),
            ("images_per_county", a.images_per_county.to_string()),
            ("min_county_support", a.min_county_support.to_string()),
            ("alpha", a.alpha.to_string()),
            ("k_folds", a.k_folds.to_string()),
            ("seed", a.seed.to_string()),
            ("statistics", a.statistics.iter().map(|s| s.id()).collect::<Vec<_>>().join(",")),
        ]);
        let artifacts = [self.out("eval/sweep.json"), self.out("eval/sweep.csv")];
        if self.is_cached("sweep", &stamp, &artifacts) {
            println!("sweep: artifacts up to date, skipping");
            return Ok(());
        }

        let records = read_images(&input)?.records;
        let counties = select_top_counties(&records, a.n_top_counties)?;
        let (sampled, _) = sample_per_county(&records, &counties, a.images_per_county, a.seed);
        let health = read_health_csv(&self.config.input.health)?;
        let params = SweepParams {
            records: &sampled,
            counties: &counties,
            health: &health,
            statistics: &a.statistics,
            min_county_support: a.min_county_support,
            alpha: a.alpha,
            k_folds: a.k_folds,
            seed: a.seed,
        };
        let result = sweep_confidence_threshold(&params, &a.sweep_thresholds)?;
        write_sweep_artifacts(&result, &a.statistics, &artifacts[0], &artifacts[1])?;
        self.write_stamp("sweep", &stamp)?;
        println!(
            "sweep: chosen threshold {} over {} candidates",
            result.chosen,
            result.rows.len()
        );
        Ok(())
    }

    pub fn run_report(&self) -> Result<()> {
        self.ensure_output_dirs()?;
        self.write_run_meta()?;
        let inputs = [
            self.out("eval/results.json"),
            self.out("eval/predictions.csv"),
            self.out("eval/feature_correlations.json"),
        ];
        for p in &inputs {
            self.require(p, "evaluate")?;
        }
        let mut parts = vec![
            ("results", file_sha256(&inputs[0])?),
            ("predictions", file_sha256(&inputs[1])?),
            ("charts", file_sha256(&inputs[2])?),
            ("label_top", self.config.output.label_top.to_string()),
        ];
        if let Some(names) = &self.config.input.county_names {
            parts.push(("county_names", file_sha256(names)?));
        }
        let stamp = stamp_of(&parts);
        let grid_csv = self.out("report/results_grid.csv");
        let grid_md = self.out("report/results_grid.md");
        if self.is_cached("report", &stamp, &[grid_csv.clone(), grid_md.clone()]) {
            println!("report: artifacts up to date, skipping");
            return Ok(());
        }

        let bundle: EvalBundle = read_json(&inputs[0])?;
        let names = match &self.config.input.county_names {
            Some(path) => read_county_names(path)?,
            None => BTreeMap::new(),
        };

        let canonical: Vec<FeatureBlockSpec> = FeatureBlockSpec::GRID
            .iter()
            .copied()
            .filter(|s| bundle.feature_sets.contains(s))
            .collect();
        let grid = ResultsGrid {
            statistics: bundle.statistics.clone(),
            feature_sets: canonical,
            cells: bundle.results.clone(),
            comparisons: bundle
                .comparisons
                .iter()
                .map(|c| (c.statistic, c.feature_set, c.dependent.clone()))
                .collect(),
        };
        let warnings = emit_results_grid(&grid, &grid_csv, &grid_md)?;
        for w in &warnings {
            eprintln!("report: {w}");
        }

        let predictions = read_predictions(&inputs[1])?;
        for stat in &bundle.statistics {
            let best = grid
                .feature_sets
                .iter()
                .filter_map(|spec| {
                    bundle
                        .results
                        .iter()
                        .find(|c| c.statistic == *stat && c.feature_set == *spec)
                        .map(|c| (*spec, c.pearson_r))
                })
                .reduce(|a, b| if b.1 > a.1 { b } else { a });
            let Some((best_spec, _)) = best else { continue };
            let Some(rows) = predictions.get(&(*stat, best_spec)) else {
                eprintln!("report: no predictions for {stat} x {best_spec}");
                continue;
            };
            let counties: Vec<FipsCode> = rows.iter().map(|(f, _, _)| f.clone()).collect();
            let actual = Array1::from_iter(rows.iter().map(|(_, a, _)| *a));
            let predicted = Array1::from_iter(rows.iter().map(|(_, _, p)| *p));
            let data = scatter_data(
                &counties,
                &actual.view(),
                &predicted.view(),
                &names,
                self.config.output.label_top,
            )?;
            emit_scatter(&data, &self.out(&format!("report/scatter_{}.csv", stat.id())))?;
            emit_scatter_svg(
                &data,
                &format!("{} ({best_spec})", stat.display_name()),
                &self.out(&format!("report/scatter_{}.svg", stat.id())),
            )?;
        }

        let charts: Vec<StatFeatureCorrelations> = read_json(&inputs[2])?;
        for chart in &charts {
            emit_feature_chart(
                &chart.top,
                &self.out(&format!("report/feature_chart_{}.csv", chart.statistic.id())),
            )?;
        }
        self.write_stamp("report", &stamp)?;
        println!("report: artifacts under {}", self.out("report").display());
        Ok(())
    }
}

/// The under-specified choices active in this build, recorded in run_meta.
pub fn run_assumptions() -> serde_json::Value {
    serde_json::json!({
        "smape": "symmetric MAPE with half-sum denominator, zero-when-both-zero, range [0,200]",
        "paired_test": "dependent overlapping-correlation z test is primary; independent Fisher z reported alongside",
        "demographic_scaling": "per-column z-score using the sample standard deviation",
    })
}

/// Generates a synthetic corpus plus a ready-to-run config for it.
pub fn run_synth(dir: &Path, seed: u64) -> Result<()> {
    let spec = SynthSpec { seed, ..SynthSpec::default() };
    let out = generate(&spec, dir)?;
    let config = PipelineConfig::for_synth_corpus(dir, seed);
    let config_text = config.to_toml();
    let config_path = dir.join("config.toml");
    fs::write(&config_path, &config_text)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let meta = serde_json::json!({
        "config_sha256": hex::encode(Sha256::digest(config_text.as_bytes())),
        "seed": seed,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "assumptions": run_assumptions(),
    });
    let meta_path = dir.join("run_meta.json");
    fs::write(&meta_path, format!("{}\n", serde_json::to_string_pretty(&meta).unwrap()))
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    println!(
        "synth: corpus under {} (achievable r {})",
        dir.display(),
        out.expected_signal
            .achievable_r
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "undefined".into())
    );
    println!("synth: wrote {}", config_path.display());
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn stamp_of(parts: &[(&str, String)]) -> String {
    let mut hasher = Sha256::new();
    for (key, value) in parts {
        hasher.update(key.as_bytes());
        hasher.update([0u8]);
        hasher.update(value.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

type PredictionRows = Vec<(FipsCode, f64, f64)>;

fn read_predictions(path: &Path) -> Result<BTreeMap<(HealthStat, FeatureBlockSpec), PredictionRows>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut map: BTreeMap<(HealthStat, FeatureBlockSpec), PredictionRows> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let context = |m: String| Error::Validation(format!("{}:{line}: {m}", path.display()));
        let row = row.map_err(|e| context(e.to_string()))?;
        if row.len() != 5 {
            return Err(context(format!("expected 5 fields, got {}", row.len())));
        }
        let stat: HealthStat = row[0].parse().map_err(|e: Error| context(e.to_string()))?;
        let spec = FeatureBlockSpec::parse(&row[1]).map_err(|e| context(e.to_string()))?;
        let fips = FipsCode::new(&row[2]).map_err(|e| context(e.to_string()))?;
        let actual: f64 = row[3].parse().map_err(|_| context(format!("bad actual {:?}", &row[3])))?;
        let predicted: f64 =
            row[4].parse().map_err(|_| context(format!("bad predicted {:?}", &row[4])))?;
        map.entry((stat, spec)).or_default().push((fips, actual, predicted));
    }
    Ok(map)
}

fn write_sweep_artifacts(
    result: &SweepResult,
    statistics: &[HealthStat],
    json_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    fs::write(
        json_path,
        format!("{}\n", serde_json::to_string_pretty(result).unwrap()),
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let file = File::create(csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("threshold,surviving_tags");
    for stat in statistics {
        header.push_str(",r_");
        header.push_str(stat.id());
    }
    header.push_str(",macro_r");
    writeln!(w, "{header}").map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    for row in &result.rows {
        let mut line = format!("{},{}", row.threshold, row.surviving_tags);
        for r in &row.per_stat_r {
            line.push_str(&format!(",{r:.4}"));
        }
        line.push_str(&format!(",{:.4}", row.macro_r));
        writeln!(w, "{line}").map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_are_order_sensitive_and_stable() {
        let a = stamp_of(&[("x", "1".into()), ("y", "2".into())]);
        let b = stamp_of(&[("x", "1".into()), ("y", "2".into())]);
        let c = stamp_of(&[("y", "2".into()), ("x", "1".into())]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn assumptions_name_the_three_choices() {
        let a = run_assumptions();
        let text = a.to_string();
        for key in ["smape", "paired_test", "demographic_scaling"] {
            assert!(text.contains(key));
        }
    }
}
