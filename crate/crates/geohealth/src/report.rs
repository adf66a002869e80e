//! Report emission: the results grid (CSV + Markdown), scatter data with
//! labeled outliers, and the feature-correlation chart data.
//!
//! Emission is deterministic: fixed orderings, fixed numeric formatting
//! (2 decimals in the human-readable grid, 4 in machine-readable CSVs), so
//! re-emitting the same structures yields byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::analysis::FeatureCorrelation;
use crate::eval::significance::CorrelationComparison;
use crate::eval::EvalResult;
use crate::features::FeatureBlockSpec;
use crate::ingest::{FipsCode, HealthStat};

/// The material behind one results grid: cell metrics plus per-cell
/// comparisons against the demographics-only baseline.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ResultsGrid {
    /// Row order.
    pub statistics: Vec<HealthStat>,
    /// Column order.
    pub feature_sets: Vec<FeatureBlockSpec>,
    pub cells: Vec<EvalResult>,
    /// Comparison of (statistic, feature set) against the baseline.
    pub comparisons: Vec<(HealthStat, FeatureBlockSpec, CorrelationComparison)>,
}

impl ResultsGrid {
    fn cell(&self, stat: HealthStat, spec: FeatureBlockSpec) -> Option<&EvalResult> {
        self.cells
            .iter()
            .find(|c| c.statistic == stat && c.feature_set == spec)
    }

    fn comparison(&self, stat: HealthStat, spec: FeatureBlockSpec) -> Option<&CorrelationComparison> {
        self.comparisons
            .iter()
            .find(|(s, f, _)| *s == stat && *f == spec)
            .map(|(_, _, c)| c)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    ))
}

/// Writes the machine-readable grid CSV and the Markdown rendering. Missing
/// cells are emitted blank; each produces a warning in the returned list.
pub fn emit_results_grid(
    grid: &ResultsGrid,
    csv_path: &Path,
    md_path: &Path,
) -> Result<Vec<String>> {
    let mut warnings = Vec::new();

    let mut csv = csv::Writer::from_writer(create(csv_path)?);
    csv.write_record(["statistic", "feature_set", "pearson_r", "smape", "p_vs_baseline", "stars"])
        .map_err(|e| Error::Validation(format!("{}: {e}", csv_path.display())))?;
    for stat in &grid.statistics {
        for spec in &grid.feature_sets {
            let (r, smape) = match grid.cell(*stat, *spec) {
                Some(c) => (format!("{:.4}", c.pearson_r), format!("{:.4}", c.smape_percent)),
                None => {
                    warnings.push(format!("missing grid cell: {stat} x {spec}"));
                    (String::new(), String::new())
                }
            };
            let (p, stars) = match grid.comparison(*stat, *spec) {
                Some(c) => (format!("{:.4}", c.p), c.stars.as_str().to_string()),
                None => (String::new(), String::new()),
            };
            csv.write_record([stat.id(), &spec.to_string(), &r, &smape, &p, &stars])
                .map_err(|e| Error::Validation(format!("{}: {e}", csv_path.display())))?;
        }
    }
    csv.flush().map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let mut md = create(md_path)?;
    let header: Vec<String> = grid.feature_sets.iter().map(|s| s.to_string()).collect();
    let write_table = |md: &mut BufWriter<File>, title: &str, better_high: bool| -> Result<()> {
        writeln!(md, "## {title}\n").map_err(|e| Error::io(md_path.display().to_string(), e))?;
        writeln!(md, "| Statistic | {} |", header.join(" | "))
            .map_err(|e| Error::io(md_path.display().to_string(), e))?;
        writeln!(md, "|---|{}", "---|".repeat(header.len()))
            .map_err(|e| Error::io(md_path.display().to_string(), e))?;
        for stat in &grid.statistics {
            let values: Vec<Option<f64>> = grid
                .feature_sets
                .iter()
                .map(|spec| {
                    grid.cell(*stat, *spec).map(|c| {
                        if better_high {
                            c.pearson_r
                        } else {
                            c.smape_percent
                        }
                    })
                })
                .collect();
            // ties flag the earliest set in canonical order only
            let mut best_idx: Option<usize> = None;
            for (i, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    let better = match best_idx.and_then(|j| values[j]) {
                        None => true,
                        Some(w) => {
                            if better_high {
                                *v > w
                            } else {
                                *v < w
                            }
                        }
                    };
                    if better {
                        best_idx = Some(i);
                    }
                }
            }
            let mut row = format!("| {} |", stat.display_name());
            for (i, (spec, value)) in grid.feature_sets.iter().zip(&values).enumerate() {
                let cell = match value {
                    Some(v) => {
                        let stars = grid
                            .comparison(*stat, *spec)
                            .map(|c| c.stars.as_str())
                            .unwrap_or("");
                        if best_idx == Some(i) {
                            format!("**{v:.2}**{stars}")
                        } else {
                            format!("{v:.2}{stars}")
                        }
                    }
                    None => String::new(),
                };
                row.push_str(&format!(" {cell} |"));
            }
            writeln!(md, "{row}").map_err(|e| Error::io(md_path.display().to_string(), e))?;
        }
        writeln!(md).map_err(|e| Error::io(md_path.display().to_string(), e))
    };
    write_table(&mut md, "Pearson r", true)?;
    write_table(&mut md, "SMAPE (%)", false)?;
    md.flush().map_err(|e| Error::io(md_path.display().to_string(), e))?;

    Ok(warnings)
}

/// One scatter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterDatum {
    pub fips: FipsCode,
    pub county_name: Option<String>,
    pub actual: f64,
    pub predicted: f64,
    /// predicted − actual, unclamped.
    pub residual: f64,
    pub outlier: bool,
}

/// Builds scatter data from pooled predictions and flags the `label_top`
/// counties by |residual| (ties broken by FIPS ascending).
pub fn scatter_data(
    counties: &[FipsCode],
    actual: &ArrayView1<f64>,
    predicted: &ArrayView1<f64>,
    names: &BTreeMap<FipsCode, String>,
    label_top: usize,
) -> Result<Vec<ScatterDatum>> {
    if counties.len() != actual.len() || counties.len() != predicted.len() {
        return Err(Error::Dim(format!(
            "{} counties, {} actuals, {} predictions",
            counties.len(),
            actual.len(),
            predicted.len()
        )));
    }
    let mut data: Vec<ScatterDatum> = counties
        .iter()
        .zip(actual.iter().zip(predicted.iter()))
        .map(|(fips, (a, p))| ScatterDatum {
            fips: fips.clone(),
            county_name: names.get(fips).cloned(),
            actual: *a,
            predicted: *p,
            residual: p - a,
            outlier: false,
        })
        .collect();
    let mut rank: Vec<usize> = (0..data.len()).collect();
    rank.sort_by(|&a, &b| {
        data[b]
            .residual
            .abs()
            .partial_cmp(&data[a].residual.abs())
            .expect("finite residuals")
            .then_with(|| data[a].fips.cmp(&data[b].fips))
    });
    for &i in rank.iter().take(label_top) {
        data[i].outlier = true;
    }
    Ok(data)
}

/// Writes scatter data as CSV, one row per county in input order.
pub fn emit_scatter(data: &[ScatterDatum], path: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    csv.write_record(["fips", "county_name", "actual", "predicted", "residual", "outlier"])
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for d in data {
        csv.write_record([
            d.fips.as_str(),
            d.county_name.as_deref().unwrap_or(""),
            &format!("{:.4}", d.actual),
            &format!("{:.4}", d.predicted),
            &format!("{:.4}", d.residual),
            if d.outlier { "true" } else { "false" },
        ])
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    csv.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Self-contained SVG scatter plot with a y=x reference line; outliers get
/// text labels (county name when known, FIPS otherwise).
pub fn emit_scatter_svg(data: &[ScatterDatum], title: &str, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let size = 480.0;
    let margin = 48.0;
    let inner = size - 2.0 * margin;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in data {
        lo = lo.min(d.actual).min(d.predicted);
        hi = hi.max(d.actual).max(d.predicted);
    }
    if !lo.is_finite() || hi <= lo {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let scale = |v: f64| margin + (v - lo) / (hi - lo) * inner;
    let sx = scale;
    let sy = |v: f64| size - scale(v);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"{margin}\" y=\"{margin}\" width=\"{inner}\" height=\"{inner}\" fill=\"none\" stroke=\"#999\"/>\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        size / 2.0,
        title
    ));
    out.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n",
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    ));
    for d in data {
        out.push_str(&format!(
            "  <circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#2b6cb0\" fill-opacity=\"0.6\"/>\n",
            sx(d.actual),
            sy(d.predicted)
        ));
    }
    for d in data.iter().filter(|d| d.outlier) {
        let label = d.county_name.as_deref().unwrap_or(d.fips.as_str());
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#c53030\">{}</text>\n",
            sx(d.actual) + 5.0,
            sy(d.predicted) - 5.0,
            label
        ));
    }
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">actual</text>\n",
        size / 2.0,
        size - 10.0
    ));
    out.push_str(&format!(
        "  <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {:.1})\">predicted</text>\n",
        size / 2.0,
        size / 2.0
    ));
    out.push_str("</svg>\n");
    w.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes ranked feature correlations as CSV, order preserved. Demographic
/// features are rendered with a "D: " name prefix.
pub fn emit_feature_chart(correlations: &[FeatureCorrelation], path: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    csv.write_record(["feature", "block", "r", "ci_low", "ci_high"])
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for c in correlations {
        let name = if c.block == "D" {
            format!("D: {}", c.name)
        } else {
            c.name.clone()
        };
        csv.write_record([
            name.as_str(),
            c.block.as_str(),
            &format!("{:.4}", c.r),
            &format!("{:.4}", c.ci_low),
            &format!("{:.4}", c.ci_high),
        ])
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    csv.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::significance::{compare_correlations, Method};
    use ndarray::array;

    fn fips(i: usize) -> FipsCode {
        FipsCode::new(&format!("{i:05}")).unwrap()
    }

    fn grid_for_row(rs: [f64; 6]) -> ResultsGrid {
        let specs = FeatureBlockSpec::GRID;
        let cells = specs
            .iter()
            .zip(rs)
            .map(|(spec, r)| EvalResult {
                statistic: HealthStat::Smokers,
                feature_set: *spec,
                pearson_r: r,
                smape_percent: 10.0,
                n: 100,
            })
            .collect();
        ResultsGrid {
            statistics: vec![HealthStat::Smokers],
            feature_sets: specs.to_vec(),
            cells,
            comparisons: vec![],
        }
    }

    #[test]
    fn markdown_flags_best_r_with_two_decimals() {
        let grid = grid_for_row([0.55, 0.53, 0.72, 0.73, 0.75, 0.73]);
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("grid.csv");
        let md_path = dir.path().join("grid.md");
        let warnings = emit_results_grid(&grid, &csv_path, &md_path).unwrap();
        assert!(warnings.is_empty());
        let md = std::fs::read_to_string(&md_path).unwrap();
        assert!(
            md.contains("| Smokers | 0.55 | 0.53 | 0.72 | 0.73 | **0.75** | 0.73 |"),
            "markdown row missing or misformatted:\n{md}"
        );
    }

    #[test]
    fn stars_attach_to_baseline_comparisons() {
        let mut grid = grid_for_row([0.55, 0.53, 0.72, 0.73, 0.75, 0.73]);
        let spec_iud = FeatureBlockSpec { user: true, imagga: true, demographics: true };
        let cmp = compare_correlations(0.73, 0.72, 0.9, 100, Method::Dependent).unwrap();
        grid.comparisons.push((HealthStat::Smokers, spec_iud, cmp));
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("grid.csv");
        let md_path = dir.path().join("grid.md");
        emit_results_grid(&grid, &csv_path, &md_path).unwrap();
        let md = std::fs::read_to_string(&md_path).unwrap();
        let row = md.lines().find(|l| l.starts_with("| Smokers |")).unwrap();
        let stars = grid.comparisons[0].2.stars.as_str();
        assert!(row.contains(&format!("0.73{stars}")), "{row}");
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.contains(&format!("smokers,U+I+D,0.7300,10.0000,{:.4},{stars}", grid.comparisons[0].2.p)), "{csv}");
    }

    #[test]
    fn full_grid_emits_54_data_rows() {
        let specs = FeatureBlockSpec::GRID.to_vec();
        let mut cells = Vec::new();
        for stat in HealthStat::ALL {
            for (i, spec) in specs.iter().enumerate() {
                cells.push(EvalResult {
                    statistic: stat,
                    feature_set: *spec,
                    pearson_r: 0.1 * i as f64,
                    smape_percent: 20.0 - i as f64,
                    n: 100,
                });
            }
        }
        let grid = ResultsGrid {
            statistics: HealthStat::ALL.to_vec(),
            feature_sets: specs,
            cells,
            comparisons: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("grid.csv");
        emit_results_grid(&grid, &csv_path, &dir.path().join("grid.md")).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 55);
    }

    #[test]
    fn missing_cell_is_blank_with_warning() {
        let mut grid = grid_for_row([0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        grid.cells.pop();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("grid.csv");
        let warnings =
            emit_results_grid(&grid, &csv_path, &dir.path().join("grid.md")).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("U+I+D"), "{}", warnings[0]);
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.lines().any(|l| l == "smokers,U+I+D,,,,"), "{csv}");
    }

    #[test]
    fn single_cell_grid_has_one_row() {
        let grid = ResultsGrid {
            statistics: vec![HealthStat::Diabetic],
            feature_sets: vec![FeatureBlockSpec::D],
            cells: vec![EvalResult {
                statistic: HealthStat::Diabetic,
                feature_set: FeatureBlockSpec::D,
                pearson_r: 0.42,
                smape_percent: 9.0,
                n: 50,
            }],
            comparisons: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("grid.csv");
        emit_results_grid(&grid, &csv_path, &dir.path().join("grid.md")).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn scatter_flags_top_residuals_with_fips_ties() {
        let counties: Vec<FipsCode> = (1..=5).map(fips).collect();
        let actual = array![1.0, 1.0, 1.0, 1.0, 1.0];
        let predicted = array![1.0, 1.0, 1.0, 1.0, 1.0];
        let data = scatter_data(&counties, &actual.view(), &predicted.view(), &BTreeMap::new(), 3)
            .unwrap();
        let flagged: Vec<&str> = data
            .iter()
            .filter(|d| d.outlier)
            .map(|d| d.fips.as_str())
            .collect();
        assert_eq!(flagged, ["00001", "00002", "00003"]);
        assert!(data.iter().all(|d| d.residual == 0.0));
    }

    #[test]
    fn scatter_counts_and_outlier_count() {
        let counties: Vec<FipsCode> = (1..=100).map(fips).collect();
        let actual = ndarray::Array1::from_shape_fn(100, |i| i as f64);
        let predicted = ndarray::Array1::from_shape_fn(100, |i| i as f64 + ((i * 13) % 7) as f64);
        let data = scatter_data(&counties, &actual.view(), &predicted.view(), &BTreeMap::new(), 3)
            .unwrap();
        assert_eq!(data.len(), 100);
        assert_eq!(data.iter().filter(|d| d.outlier).count(), 3);
    }

    #[test]
    fn negative_prediction_survives_unclamped() {
        let counties = vec![fips(36)];
        let mut names = BTreeMap::new();
        names.insert(fips(36), "New York, NY".to_string());
        let actual = array![0.0];
        let predicted = array![-1.9];
        let data =
            scatter_data(&counties, &actual.view(), &predicted.view(), &names, 1).unwrap();
        assert_eq!(data[0].residual, -1.9);
        assert_eq!(data[0].predicted, -1.9);
        assert!(data[0].outlier);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        emit_scatter(&data, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.contains("\"New York, NY\",0.0000,-1.9000,-1.9000,true"), "{body}");
    }

    #[test]
    fn reemission_is_byte_identical() {
        let counties: Vec<FipsCode> = (1..=10).map(fips).collect();
        let actual = ndarray::Array1::from_shape_fn(10, |i| (i as f64).sin() * 5.0);
        let predicted = ndarray::Array1::from_shape_fn(10, |i| (i as f64).cos() * 5.0);
        let data = scatter_data(&counties, &actual.view(), &predicted.view(), &BTreeMap::new(), 3)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_scatter(&data, &a).unwrap();
        emit_scatter(&data, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let grid = grid_for_row([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let ga = dir.path().join("ga.csv");
        let gb = dir.path().join("gb.csv");
        emit_results_grid(&grid, &ga, &dir.path().join("ga.md")).unwrap();
        emit_results_grid(&grid, &gb, &dir.path().join("gb.md")).unwrap();
        assert_eq!(std::fs::read(&ga).unwrap(), std::fs::read(&gb).unwrap());
    }

    #[test]
    fn feature_chart_preserves_order_and_prefixes_demographics() {
        let correlations = vec![
            FeatureCorrelation { name: "sushi".into(), block: "I".into(), r: 0.8, ci_low: 0.7, ci_high: 0.87 },
            FeatureCorrelation { name: "median_income".into(), block: "D".into(), r: -0.75, ci_low: -0.83, ci_high: -0.64 },
            FeatureCorrelation { name: "brunch".into(), block: "U".into(), r: 0.6, ci_low: 0.45, ci_high: 0.72 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        emit_feature_chart(&correlations, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("sushi,I,0.8000"));
        assert!(lines[2].starts_with("D: median_income,D,-0.7500"));
        assert!(lines[3].starts_with("brunch,U,0.6000"));
    }

    #[test]
    fn empty_feature_chart_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        emit_feature_chart(&[], &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.trim(), "feature,block,r,ci_low,ci_high");
    }

    #[test]
    fn svg_is_emitted_with_reference_line() {
        let counties = vec![fips(1), fips(2)];
        let actual = array![1.0, 2.0];
        let predicted = array![1.5, 1.8];
        let data =
            scatter_data(&counties, &actual.view(), &predicted.view(), &BTreeMap::new(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.svg");
        emit_scatter_svg(&data, "Smokers I+D", &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("<svg"));
        assert!(body.contains("stroke-dasharray"));
        assert!(body.contains("circle"));
    }
}
