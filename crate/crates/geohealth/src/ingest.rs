//! Canonical data model and readers/validators for all external datasets:
//! image metadata (JSON-Lines), health statistics and demographics (CSV).
//!
//! Malformed image lines are quarantined into an error report instead of
//! aborting the run; the tabular ground-truth readers are strict and fail
//! fast on schema violations.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// 5-digit county identifier: 2-digit state + 3-digit county.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FipsCode(String);

impl FipsCode {
    pub fn new(code: &str) -> Result<Self> {
        if code.len() == 5 && code.bytes().all(|b| b.is_ascii_digit()) {
            Ok(FipsCode(code.to_string()))
        } else {
            Err(Error::Validation(format!(
                "FIPS code must be exactly 5 digits, got {code:?}"
            )))
        }
    }

    /// Zero-padded code from a numeric value, for generated fixtures.
    pub fn from_u32(code: u32) -> Result<Self> {
        if code > 99_999 {
            return Err(Error::Validation(format!("FIPS code {code} exceeds 5 digits")));
        }
        Ok(FipsCode(format!("{code:05}")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FipsCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for FipsCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FipsCode::new(s)
    }
}

impl TryFrom<String> for FipsCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        FipsCode::new(&s)
    }
}

impl From<FipsCode> for String {
    fn from(f: FipsCode) -> String {
        f.0
    }
}

/// A machine-generated tag with its confidence percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineTag {
    pub tag: String,
    pub confidence: f64,
}

impl MachineTag {
    pub fn new(tag: impl Into<String>, confidence: f64) -> Result<Self> {
        let tag = tag.into();
        if tag.is_empty() {
            return Err(Error::Validation("machine tag must be nonempty".into()));
        }
        if !(0.0..=100.0).contains(&confidence) || !confidence.is_finite() {
            return Err(Error::Validation(format!(
                "confidence {confidence} out of range [0,100] for tag {tag:?}"
            )));
        }
        Ok(MachineTag { tag, confidence })
    }
}

/// One image's metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub point: GeoPoint,
    /// UTC seconds.
    pub timestamp: i64,
    /// User-provided hashtags, normalized and deduplicated.
    pub user_tags: BTreeSet<String>,
    pub machine_tags: Vec<MachineTag>,
    /// Filled by the geo module.
    pub fips: Option<FipsCode>,
}

impl ImageRecord {
    pub fn has_user_tags(&self) -> bool {
        !self.user_tags.is_empty()
    }

    pub fn has_machine_tags(&self) -> bool {
        !self.machine_tags.is_empty()
    }
}

/// Lowercase, strip one leading '#', trim whitespace. Returns `None` when
/// nothing is left.
pub fn normalize_tag(raw: &str) -> Option<String> {
    let t = raw.trim();
    let t = t.strip_prefix('#').unwrap_or(t);
    let t = t.trim();
    if t.is_empty() {
        None
    } else {
        Some(t.to_lowercase())
    }
}

/// Wire schema for one images.jsonl line.
#[derive(Serialize, Deserialize)]
struct ImageWire {
    id: String,
    lat: f64,
    lon: f64,
    ts: i64,
    user_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    machine_tags: Option<Vec<MachineTagWire>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fips: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct MachineTagWire {
    tag: String,
    confidence: f64,
}

/// One quarantined input line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

/// Counts describing a loaded image dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub total_lines: usize,
    pub valid_records: usize,
    pub invalid_lines: usize,
    pub with_user_tags: usize,
    pub with_machine_tags: usize,
}

impl DatasetManifest {
    pub fn user_tag_fraction(&self) -> f64 {
        if self.valid_records == 0 {
            0.0
        } else {
            self.with_user_tags as f64 / self.valid_records as f64
        }
    }

    pub fn machine_tag_fraction(&self) -> f64 {
        if self.valid_records == 0 {
            0.0
        } else {
            self.with_machine_tags as f64 / self.valid_records as f64
        }
    }
}

fn validate_wire(wire: ImageWire, line: usize, seen: &mut HashSet<String>) -> std::result::Result<ImageRecord, RecordError> {
    let err = |field: &str, message: String| RecordError {
        line,
        field: field.to_string(),
        message,
    };
    if wire.id.is_empty() {
        return Err(err("id", "id must be nonempty".into()));
    }
    if !(-90.0..=90.0).contains(&wire.lat) || !wire.lat.is_finite() {
        return Err(err("lat", "latitude out of range".into()));
    }
    if !(-180.0..=180.0).contains(&wire.lon) || !wire.lon.is_finite() {
        return Err(err("lon", "longitude out of range".into()));
    }
    if !seen.insert(wire.id.clone()) {
        return Err(err("id", format!("duplicate id {:?}", wire.id)));
    }
    let user_tags: BTreeSet<String> = wire
        .user_tags
        .iter()
        .filter_map(|t| normalize_tag(t))
        .collect();
    let mut machine_tags = Vec::new();
    for mt in wire.machine_tags.unwrap_or_default() {
        let Some(tag) = normalize_tag(&mt.tag) else {
            // empty after normalization: skip, like empty user tags
            continue;
        };
        match MachineTag::new(tag, mt.confidence) {
            Ok(t) => machine_tags.push(t),
            Err(e) => return Err(err("machine_tags", e.to_string())),
        }
    }
    let fips = match wire.fips {
        Some(ref s) => match FipsCode::new(s) {
            Ok(f) => Some(f),
            Err(e) => return Err(err("fips", e.to_string())),
        },
        None => None,
    };
    let point = match GeoPoint::new(wire.lat, wire.lon) {
        Ok(p) => p,
        Err(e) => return Err(err("lat", e.to_string())),
    };
    Ok(ImageRecord {
        id: wire.id,
        point,
        timestamp: wire.ts,
        user_tags,
        machine_tags,
        fips,
    })
}

/// Streaming reader over an images.jsonl file.
///
/// Yields `Ok(record)` for valid lines and `Err(RecordError)` for quarantined
/// ones, in file order. Duplicate-id detection is stateful across the stream.
pub struct ImageReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    seen_ids: HashSet<String>,
}

impl ImageReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(ImageReader {
            lines: BufReader::new(file).lines(),
            line_no: 0,
            seen_ids: HashSet::new(),
        })
    }
}

impl Iterator for ImageReader {
    type Item = std::result::Result<ImageRecord, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.line_no += 1;
                    return Some(Err(RecordError {
                        line: self.line_no,
                        field: String::new(),
                        message: format!("unreadable line: {e}"),
                    }));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let wire: ImageWire = match serde_json::from_str(&line) {
                Ok(w) => w,
                Err(e) => {
                    return Some(Err(RecordError {
                        line: self.line_no,
                        field: String::new(),
                        message: format!("malformed JSON: {e}"),
                    }))
                }
            };
            return Some(validate_wire(wire, self.line_no, &mut self.seen_ids));
        }
    }
}

/// Fully loaded image dataset plus its quarantine report and manifest.
#[derive(Debug)]
pub struct ImageDataset {
    pub records: Vec<ImageRecord>,
    pub errors: Vec<RecordError>,
    pub manifest: DatasetManifest,
}

/// Reads and validates a whole images.jsonl file.
pub fn read_images(path: &Path) -> Result<ImageDataset> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut manifest = DatasetManifest::default();
    for item in ImageReader::open(path)? {
        manifest.total_lines += 1;
        match item {
            Ok(r) => {
                manifest.valid_records += 1;
                if r.has_user_tags() {
                    manifest.with_user_tags += 1;
                }
                if r.has_machine_tags() {
                    manifest.with_machine_tags += 1;
                }
                records.push(r);
            }
            Err(e) => {
                manifest.invalid_lines += 1;
                errors.push(e);
            }
        }
    }
    Ok(ImageDataset {
        records,
        errors,
        manifest,
    })
}

/// Serializes one record as an images.jsonl line (no trailing newline).
pub fn image_wire_line(r: &ImageRecord) -> String {
    let wire = ImageWire {
        id: r.id.clone(),
        lat: r.point.latitude,
        lon: r.point.longitude,
        ts: r.timestamp,
        user_tags: r.user_tags.iter().cloned().collect(),
        machine_tags: if r.machine_tags.is_empty() {
            None
        } else {
            Some(
                r.machine_tags
                    .iter()
                    .map(|t| MachineTagWire {
                        tag: t.tag.clone(),
                        confidence: t.confidence,
                    })
                    .collect(),
            )
        },
        fips: r.fips.as_ref().map(|f| f.to_string()),
    };
    serde_json::to_string(&wire).expect("wire struct serializes")
}

/// Writes records back out in the images.jsonl wire format.
pub fn write_images(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", image_wire_line(r)).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes the quarantine report as JSON-Lines of `{line, field, message}`.
pub fn write_error_report(path: &Path, errors: &[RecordError]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for e in errors {
        let json = serde_json::to_string(e).expect("error record serializes");
        writeln!(w, "{json}").map_err(|err| Error::io(path.display().to_string(), err))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// The nine health statistics evaluated by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStat {
    Smokers,
    Obese,
    FoodEnvIndex,
    PhysicallyInactive,
    ExcessiveDrinking,
    AlcoholImpairedDrivingDeaths,
    Diabetic,
    FoodInsecure,
    LimitedAccessHealthyFood,
}

impl HealthStat {
    pub const ALL: [HealthStat; 9] = [
        HealthStat::Smokers,
        HealthStat::Obese,
        HealthStat::FoodEnvIndex,
        HealthStat::PhysicallyInactive,
        HealthStat::ExcessiveDrinking,
        HealthStat::AlcoholImpairedDrivingDeaths,
        HealthStat::Diabetic,
        HealthStat::FoodInsecure,
        HealthStat::LimitedAccessHealthyFood,
    ];

    /// Canonical identifier used in CSVs, configs and outputs.
    pub fn id(&self) -> &'static str {
        match self {
            HealthStat::Smokers => "smokers",
            HealthStat::Obese => "obese",
            HealthStat::FoodEnvIndex => "food_env_index",
            HealthStat::PhysicallyInactive => "physically_inactive",
            HealthStat::ExcessiveDrinking => "excessive_drinking",
            HealthStat::AlcoholImpairedDrivingDeaths => "alcohol_impaired_driving_deaths",
            HealthStat::Diabetic => "diabetic",
            HealthStat::FoodInsecure => "food_insecure",
            HealthStat::LimitedAccessHealthyFood => "limited_access_healthy_food",
        }
    }

    /// Human-readable row label for rendered tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            HealthStat::Smokers => "Smokers",
            HealthStat::Obese => "Obese",
            HealthStat::FoodEnvIndex => "Food Env. Index",
            HealthStat::PhysicallyInactive => "Physically Inactive",
            HealthStat::ExcessiveDrinking => "Excessive Drinking",
            HealthStat::AlcoholImpairedDrivingDeaths => "Alcohol Impaired",
            HealthStat::Diabetic => "Diabetic",
            HealthStat::FoodInsecure => "Food Insecure",
            HealthStat::LimitedAccessHealthyFood => "Limited Access",
        }
    }
}

impl fmt::Display for HealthStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for HealthStat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HealthStat::ALL
            .iter()
            .find(|h| h.id() == s)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown statistic {s:?}")))
    }
}

/// Ground-truth dependent variables keyed by (county, statistic).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HealthStatTable {
    values: BTreeMap<(FipsCode, HealthStat), f64>,
}

impl HealthStatTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fips: FipsCode, stat: HealthStat, value: f64) {
        self.values.insert((fips, stat), value);
    }

    pub fn get(&self, fips: &FipsCode, stat: HealthStat) -> Option<f64> {
        self.values.get(&(fips.clone(), stat)).copied()
    }

    pub fn remove(&mut self, fips: &FipsCode, stat: HealthStat) -> Option<f64> {
        self.values.remove(&(fips.clone(), stat))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Target vector for one statistic over an ordered county list. Every
    /// evaluated county must have a value.
    pub fn values_for(&self, stat: HealthStat, counties: &[FipsCode]) -> Result<Vec<f64>> {
        counties
            .iter()
            .map(|c| {
                self.get(c, stat).ok_or_else(|| {
                    Error::Validation(format!("county {c} has no value for statistic {stat}"))
                })
            })
            .collect()
    }
}

/// Reads `fips,stat_name,value` rows.
pub fn read_health_csv(path: &Path) -> Result<HealthStatTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    {
        let header = rdr
            .headers()
            .map_err(|e| Error::Validation(format!("{}: bad header: {e}", path.display())))?;
        let expected = ["fips", "stat_name", "value"];
        let got: Vec<&str> = header.iter().collect();
        if got != expected {
            return Err(Error::Validation(format!(
                "{}: expected header fips,stat_name,value, got {}",
                path.display(),
                got.join(",")
            )));
        }
    }
    let mut table = HealthStatTable::new();
    let mut first_line: HashMap<(FipsCode, HealthStat), usize> = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        if row.len() != 3 {
            return Err(Error::Validation(format!(
                "{}:{line}: expected 3 fields, got {}",
                path.display(),
                row.len()
            )));
        }
        let fips = FipsCode::new(&row[0])
            .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        let stat: HealthStat = row[1]
            .parse()
            .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        let value: f64 = row[2].parse().map_err(|_| {
            Error::Validation(format!(
                "{}:{line}: non-numeric value {:?}",
                path.display(),
                &row[2]
            ))
        })?;
        if let Some(prev) = first_line.insert((fips.clone(), stat), line) {
            return Err(Error::Validation(format!(
                "{}: duplicate ({}, {}) at lines {prev} and {line}",
                path.display(),
                fips,
                stat
            )));
        }
        table.insert(fips, stat, value);
    }
    Ok(table)
}

/// Baseline per-county demographic features with a header-derived schema.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemographicsTable {
    pub columns: Vec<String>,
    rows: BTreeMap<FipsCode, Vec<f64>>,
}

impl DemographicsTable {
    pub fn new(columns: Vec<String>) -> Self {
        DemographicsTable {
            columns,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, fips: FipsCode, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Validation(format!(
                "county {fips}: expected {} values, got {}",
                self.columns.len(),
                values.len()
            )));
        }
        if self.rows.insert(fips.clone(), values).is_some() {
            return Err(Error::Validation(format!("county {fips} appears twice")));
        }
        Ok(())
    }

    pub fn get(&self, fips: &FipsCode) -> Option<&[f64]> {
        self.rows.get(fips).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads `fips,<col1>,...,<colK>` rows.
pub fn read_demographics_csv(path: &Path) -> Result<DemographicsTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let columns: Vec<String> = {
        let header = rdr
            .headers()
            .map_err(|e| Error::Validation(format!("{}: bad header: {e}", path.display())))?;
        let mut it = header.iter();
        match it.next() {
            Some("fips") => {}
            other => {
                return Err(Error::Validation(format!(
                    "{}: first header column must be fips, got {:?}",
                    path.display(),
                    other.unwrap_or("")
                )))
            }
        }
        it.map(|s| s.to_string()).collect()
    };
    if columns.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no demographic columns in header",
            path.display()
        )));
    }
    let mut table = DemographicsTable::new(columns);
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        if row.len() != table.columns.len() + 1 {
            return Err(Error::Validation(format!(
                "{}:{line}: expected {} fields, got {}",
                path.display(),
                table.columns.len() + 1,
                row.len()
            )));
        }
        let fips = FipsCode::new(&row[0])
            .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        let mut values = Vec::with_capacity(table.columns.len());
        for (j, cell) in row.iter().skip(1).enumerate() {
            if cell.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "{}:{line}: county {fips} missing value for column {}",
                    path.display(),
                    table.columns[j]
                )));
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Validation(format!(
                    "{}:{line}: county {fips} non-numeric value {cell:?} in column {}",
                    path.display(),
                    table.columns[j]
                ))
            })?;
            values.push(v);
        }
        table
            .insert(fips, values)
            .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
    }
    Ok(table)
}

/// Reads an optional `fips,name` table for scatter-plot labels. Later rows
/// win on duplicate FIPS.
pub fn read_county_names(path: &Path) -> Result<BTreeMap<FipsCode, String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut names = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        if row.len() < 2 {
            return Err(Error::Validation(format!(
                "{}:{line}: expected fips,name",
                path.display()
            )));
        }
        let fips = FipsCode::new(&row[0])
            .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        names.insert(fips, row[1].to_string());
    }
    Ok(names)
}
