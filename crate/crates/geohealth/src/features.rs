//! County-level feature construction: top-county selection, per-county
//! sampling, tag vocabularies, county x tag count matrices, row
//! normalization, demographic z-scoring and block concatenation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DemographicsTable, FipsCode, ImageRecord};
use crate::num::Scalar;
use crate::tagging::{filter_by_confidence, ConfidenceThreshold};

/// Which tag stream feeds a vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagSource {
    /// User-provided hashtags.
    U,
    /// Machine tags, confidence-filtered.
    I,
}

impl fmt::Display for TagSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagSource::U => "U",
            TagSource::I => "I",
        })
    }
}

/// A deterministic tag-to-column mapping with county-support counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagVocabulary {
    tags: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    support: Vec<usize>,
}

impl TagVocabulary {
    fn new(tags: Vec<String>, support: Vec<usize>) -> Self {
        let index = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TagVocabulary { tags, index, support }
    }

    /// Vocabulary over fixed column names (e.g. demographic columns), all
    /// with the same support.
    pub fn from_columns(names: Vec<String>, support: usize) -> Self {
        let support = vec![support; names.len()];
        TagVocabulary::new(names, support)
    }

    /// Rebuilds the tag index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn support_of(&self, col: usize) -> usize {
        self.support[col]
    }
}

/// Tags an image contributes, as a presence set.
fn image_tags(record: &ImageRecord, source: TagSource, threshold: ConfidenceThreshold) -> BTreeSet<String> {
    match source {
        TagSource::U => record.user_tags.iter().cloned().collect(),
        TagSource::I => filter_by_confidence(&record.machine_tags, threshold)
            .into_iter()
            .map(|t| t.tag)
            .collect(),
    }
}

/// Selects the `n` counties with the most images. Ties on count break toward
/// the smaller FIPS; the returned list is sorted by FIPS ascending.
pub fn select_top_counties(records: &[ImageRecord], n: usize) -> Result<Vec<FipsCode>> {
    let mut counts: BTreeMap<FipsCode, usize> = BTreeMap::new();
    for r in records {
        if let Some(fips) = &r.fips {
            *counts.entry(fips.clone()).or_insert(0) += 1;
        }
    }
    if counts.len() < n {
        return Err(Error::InvalidInput(format!(
            "need {n} counties with images, found {}",
            counts.len()
        )));
    }
    let mut ranked: Vec<(FipsCode, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut top: Vec<FipsCode> = ranked.into_iter().take(n).map(|(f, _)| f).collect();
    top.sort();
    Ok(top)
}

/// Counties whose candidate pool fell short of the requested sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleShortfall {
    pub fips: FipsCode,
    pub available: usize,
    pub requested: usize,
}

/// Draws up to `m` records per listed county, uniformly without replacement.
/// Counties with fewer than `m` candidates contribute everything they have.
/// The draw is seeded per county (seed mixed with the FIPS digits) so county
/// samples are independent of each other and of county iteration order.
/// Output is ordered by county, then by position in `records`.
pub fn sample_per_county(
    records: &[ImageRecord],
    counties: &[FipsCode],
    m: usize,
    seed: u64,
) -> (Vec<ImageRecord>, Vec<SampleShortfall>) {
    let listed: HashSet<&FipsCode> = counties.iter().collect();
    let mut by_county: BTreeMap<&FipsCode, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(fips) = &r.fips {
            if listed.contains(fips) {
                by_county.entry(fips).or_default().push(i);
            }
        }
    }
    let mut out = Vec::new();
    let mut shortfalls = Vec::new();
    for fips in counties {
        let Some(indices) = by_county.get(fips) else {
            shortfalls.push(SampleShortfall {
                fips: fips.clone(),
                available: 0,
                requested: m,
            });
            continue;
        };
        let mut chosen: Vec<usize> = if indices.len() <= m {
            if indices.len() < m {
                shortfalls.push(SampleShortfall {
                    fips: fips.clone(),
                    available: indices.len(),
                    requested: m,
                });
            }
            indices.clone()
        } else {
            let county_seed = seed ^ fips
                .as_str()
                .parse::<u64>()
                .expect("FIPS is all digits")
                .wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut rng = ChaCha8Rng::seed_from_u64(county_seed);
            let mut picked: Vec<usize> =
                indices.choose_multiple(&mut rng, m).copied().collect();
            picked.sort_unstable();
            picked
        };
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| records[i].clone()));
    }
    (out, shortfalls)
}

/// Builds the vocabulary of tags present in at least `min_county_support`
/// distinct counties, lexicographically ordered.
pub fn build_vocabulary(
    records: &[ImageRecord],
    source: TagSource,
    threshold: ConfidenceThreshold,
    min_county_support: usize,
) -> Result<TagVocabulary> {
    let mut counties_per_tag: BTreeMap<String, BTreeSet<FipsCode>> = BTreeMap::new();
    for r in records {
        let Some(fips) = &r.fips else { continue };
        for tag in image_tags(r, source, threshold) {
            counties_per_tag.entry(tag).or_default().insert(fips.clone());
        }
    }
    let mut tags = Vec::new();
    let mut support = Vec::new();
    for (tag, counties) in counties_per_tag {
        if counties.len() >= min_county_support {
            tags.push(tag);
            support.push(counties.len());
        }
    }
    if tags.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no {source} tags reach county support {min_county_support}"
        )));
    }
    Ok(TagVocabulary::new(tags, support))
}

/// Rows are counties, columns vocabulary tags, entries image-presence counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CountyTagMatrix {
    pub counties: Vec<FipsCode>,
    pub vocab: TagVocabulary,
    pub matrix: Array2<f64>,
    pub normalized: bool,
    /// Records whose FIPS fell outside the county list.
    pub skipped: usize,
}

/// Counts, per county and vocabulary tag, how many images carry the tag.
/// Each image contributes at most 1 per tag. Records outside the county list
/// are skipped and counted.
pub fn build_count_matrix(
    records: &[ImageRecord],
    vocab: &TagVocabulary,
    counties: &[FipsCode],
    source: TagSource,
    threshold: ConfidenceThreshold,
) -> CountyTagMatrix {
    let row_of: HashMap<&FipsCode, usize> = counties
        .iter()
        .enumerate()
        .map(|(i, f)| (f, i))
        .collect();
    let mut matrix = Array2::<f64>::zeros((counties.len(), vocab.len()));
    let mut skipped = 0usize;
    for r in records {
        let row = match r.fips.as_ref().and_then(|f| row_of.get(f)) {
            Some(&row) => row,
            None => {
                skipped += 1;
                continue;
            }
        };
        for tag in image_tags(r, source, threshold) {
            if let Some(col) = vocab.index_of(&tag) {
                matrix[[row, col]] += 1.0;
            }
        }
    }
    CountyTagMatrix {
        counties: counties.to_vec(),
        vocab: vocab.clone(),
        matrix,
        normalized: false,
        skipped,
    }
}

/// Divides each nonzero row by its Euclidean norm; zero rows stay zero.
pub fn normalize_rows_l2<S: Scalar>(matrix: &mut Array2<S>) {
    for mut row in matrix.rows_mut() {
        let norm = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
        if norm > S::zero() {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

impl CountyTagMatrix {
    pub fn normalize(&mut self) {
        normalize_rows_l2(&mut self.matrix);
        self.normalized = true;
    }
}

/// Z-scores each demographic column over the listed counties (sample std).
/// Constant columns become all-zero. Every county must be present.
pub fn standardize_demographics(
    table: &DemographicsTable,
    counties: &[FipsCode],
) -> Result<Array2<f64>> {
    let width = table.columns.len();
    let mut matrix = Array2::<f64>::zeros((counties.len(), width));
    for (i, fips) in counties.iter().enumerate() {
        let row = table.get(fips).ok_or_else(|| {
            Error::InvalidInput(format!("county {fips} missing from demographics"))
        })?;
        for (j, v) in row.iter().enumerate() {
            matrix[[i, j]] = *v;
        }
    }
    standardize_columns(&mut matrix);
    Ok(matrix)
}

/// In-place column z-scoring with sample standard deviation; constant
/// columns map to zero.
pub fn standardize_columns<S: Scalar>(matrix: &mut Array2<S>) {
    let n = matrix.nrows();
    if n < 2 {
        matrix.fill(S::zero());
        return;
    }
    let nf = S::from_usize_c(n);
    for mut col in matrix.columns_mut() {
        let mean = col.iter().copied().sum::<S>() / nf;
        let ss = col.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>();
        let std = (ss / (nf - S::one())).sqrt();
        if std > S::zero() {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            col.fill(S::zero());
        }
    }
}

/// One of the Table-style feature sets: a nonempty subset of {U, I, D}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureBlockSpec {
    pub user: bool,
    pub imagga: bool,
    pub demographics: bool,
}

impl FeatureBlockSpec {
    pub const U: FeatureBlockSpec = FeatureBlockSpec { user: true, imagga: false, demographics: false };
    pub const I: FeatureBlockSpec = FeatureBlockSpec { user: false, imagga: true, demographics: false };
    pub const D: FeatureBlockSpec = FeatureBlockSpec { user: false, imagga: false, demographics: true };

    /// The six sets reported in the results grid, in column order.
    pub const GRID: [FeatureBlockSpec; 6] = [
        Self::U,
        Self::I,
        Self::D,
        FeatureBlockSpec { user: true, imagga: false, demographics: true },
        FeatureBlockSpec { user: false, imagga: true, demographics: true },
        FeatureBlockSpec { user: true, imagga: true, demographics: true },
    ];

    pub fn parse(label: &str) -> Result<Self> {
        let mut spec = FeatureBlockSpec { user: false, imagga: false, demographics: false };
        for part in label.split('+') {
            match part.trim() {
                "U" | "u" => spec.user = true,
                "I" | "i" => spec.imagga = true,
                "D" | "d" => spec.demographics = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown feature block {other:?} in {label:?}"
                    )))
                }
            }
        }
        if !(spec.user || spec.imagga || spec.demographics) {
            return Err(Error::Config(format!("empty feature set {label:?}")));
        }
        Ok(spec)
    }
}

impl fmt::Display for FeatureBlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.user {
            parts.push("U");
        }
        if self.imagga {
            parts.push("I");
        }
        if self.demographics {
            parts.push("D");
        }
        f.write_str(&parts.join("+"))
    }
}

/// Provenance of one design-matrix column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnOrigin {
    /// "U", "I" or "D".
    pub block: String,
    /// Tag text or demographic column name.
    pub name: String,
}

/// A ready design matrix with per-column provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub spec: FeatureBlockSpec,
    pub counties: Vec<FipsCode>,
    pub matrix: Array2<f64>,
    pub origins: Vec<ColumnOrigin>,
}

/// Concatenates the requested blocks column-wise in canonical order U, I, D.
/// All blocks must share the same county row order.
pub fn combine_blocks(
    spec: FeatureBlockSpec,
    user: Option<&CountyTagMatrix>,
    imagga: Option<&CountyTagMatrix>,
    demographics: Option<(&Array2<f64>, &[String], &[FipsCode])>,
) -> Result<FeatureSet> {
    struct Block<'a> {
        view: ArrayView2<'a, f64>,
        counties: &'a [FipsCode],
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut origins: Vec<ColumnOrigin> = Vec::new();

    if spec.user {
        let m = user.ok_or_else(|| Error::InvalidInput("user block requested but absent".into()))?;
        blocks.push(Block { view: m.matrix.view(), counties: &m.counties });
        origins.extend(m.vocab.tags().iter().map(|t| ColumnOrigin {
            block: "U".into(),
            name: t.clone(),
        }));
    }
    if spec.imagga {
        let m = imagga.ok_or_else(|| Error::InvalidInput("machine-tag block requested but absent".into()))?;
        blocks.push(Block { view: m.matrix.view(), counties: &m.counties });
        origins.extend(m.vocab.tags().iter().map(|t| ColumnOrigin {
            block: "I".into(),
            name: t.clone(),
        }));
    }
    if spec.demographics {
        let (m, cols, rows) =
            demographics.ok_or_else(|| Error::InvalidInput("demographics block requested but absent".into()))?;
        blocks.push(Block { view: m.view(), counties: rows });
        origins.extend(cols.iter().map(|c| ColumnOrigin {
            block: "D".into(),
            name: c.clone(),
        }));
    }
    let Some(first) = blocks.first() else {
        return Err(Error::InvalidInput("empty feature set".into()));
    };
    let counties = first.counties;
    if blocks.iter().any(|b| b.counties != counties) {
        return Err(Error::InvalidInput("feature blocks disagree on county order".into()));
    }
    let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view).collect();
    let matrix = ndarray::concatenate(Axis(1), &views)
        .map_err(|e| Error::InvalidInput(format!("block concatenation failed: {e}")))?;
    let counties = counties.to_vec();
    Ok(FeatureSet { spec, counties, matrix, origins })
}

/// Header line of the matrix dump format.
#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    counties: Vec<FipsCode>,
    vocab: TagVocabulary,
    normalized: bool,
    skipped: usize,
}

/// Writes a county x tag matrix as a JSON header line followed by dense CSV
/// rows. Floats use the shortest round-trip encoding, so the dump is
/// lossless and byte-stable.
pub fn write_matrix(path: &Path, m: &CountyTagMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header = MatrixHeader {
        counties: m.counties.clone(),
        vocab: m.vocab.clone(),
        normalized: m.normalized,
        skipped: m.skipped,
    };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for row in m.matrix.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", fields.join(","))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a matrix dump written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<CountyTagMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{}: empty matrix dump", path.display())))?
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header: MatrixHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Validation(format!("{}: bad matrix header: {e}", path.display())))?;
    header.vocab.reindex();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for line in lines {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.is_empty() {
            continue;
        }
        for field in line.split(',') {
            let v: f64 = field.parse().map_err(|_| {
                Error::Validation(format!("{}: bad matrix value {field:?}", path.display()))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = header.vocab.len();
    if rows != header.counties.len() || data.len() != rows * cols {
        return Err(Error::Validation(format!(
            "{}: matrix shape mismatch ({} rows, {} values, expected {}x{})",
            path.display(),
            rows,
            data.len(),
            header.counties.len(),
            cols
        )));
    }
    let matrix = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(CountyTagMatrix {
        counties: header.counties,
        vocab: header.vocab,
        matrix,
        normalized: header.normalized,
        skipped: header.skipped,
    })
}
