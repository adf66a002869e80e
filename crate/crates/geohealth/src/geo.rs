//! Resolution of image coordinates to U.S. county FIPS codes.
//!
//! Three backends share one trait: an offline rectangle-fixture lookup, a
//! remote HTTP client (FCC Block API shape) with bounded retries and rate
//! limiting, and a persistent append-only cache that can wrap either.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FipsCode, ImageRecord};

/// A validated latitude/longitude pair in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude) || !latitude.is_finite() {
            return Err(Error::Validation(format!("latitude {latitude} out of range")));
        }
        if !(-180.0..=180.0).contains(&longitude) || !longitude.is_finite() {
            return Err(Error::Validation(format!("longitude {longitude} out of range")));
        }
        Ok(GeoPoint { latitude, longitude })
    }

    /// Cache key: both coordinates rounded to 4 decimal places (~11 m),
    /// stored as scaled integers so -0.0 and 0.0 collapse.
    pub fn quantize(&self) -> (i64, i64) {
        let q = |v: f64| (v * 1e4).round() as i64;
        (q(self.latitude), q(self.longitude))
    }
}

/// One persistent cache entry, keyed by the quantized point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeoCacheEntry {
    pub lat_e4: i64,
    pub lon_e4: i64,
    pub fips: FipsCode,
    /// Retrieval time, UTC seconds.
    pub ts: u64,
}

/// Outcome of resolving one point.
pub type Resolution = Option<FipsCode>;

/// A backend that maps points to counties. `Ok(None)` means the point is
/// outside covered territory.
pub trait CountyResolver: Send + Sync {
    fn resolve(&self, point: &GeoPoint) -> Result<Resolution>;

    /// Remote requests issued so far (0 for pure backends).
    fn remote_calls(&self) -> u64 {
        0
    }
}

/// Resolves a point through the given backend.
pub fn resolve_county(point: &GeoPoint, resolver: &dyn CountyResolver) -> Result<Resolution> {
    resolver.resolve(point)
}

/// Offline fixture: `lat_min,lat_max,lon_min,lon_max,fips` rectangles checked
/// in file order, bounds inclusive. First match wins.
pub struct RectangleLookup {
    cells: Vec<(f64, f64, f64, f64, FipsCode)>,
}

impl RectangleLookup {
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut cells = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row
                .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
            if row.len() != 5 {
                return Err(Error::Validation(format!(
                    "{}:{line}: expected 5 fields, got {}",
                    path.display(),
                    row.len()
                )));
            }
            let num = |j: usize| -> Result<f64> {
                row[j].parse().map_err(|_| {
                    Error::Validation(format!(
                        "{}:{line}: non-numeric bound {:?}",
                        path.display(),
                        &row[j]
                    ))
                })
            };
            let fips = FipsCode::new(&row[4])
                .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
            cells.push((num(0)?, num(1)?, num(2)?, num(3)?, fips));
        }
        Ok(RectangleLookup { cells })
    }

    pub fn lookup(&self, point: &GeoPoint) -> Resolution {
        self.cells
            .iter()
            .find(|(lat0, lat1, lon0, lon1, _)| {
                (*lat0..=*lat1).contains(&point.latitude)
                    && (*lon0..=*lon1).contains(&point.longitude)
            })
            .map(|(_, _, _, _, fips)| fips.clone())
    }
}

impl CountyResolver for RectangleLookup {
    fn resolve(&self, point: &GeoPoint) -> Result<Resolution> {
        Ok(self.lookup(point))
    }
}

/// Shared token-bucket limiter; capacity equals the per-second rate.
pub struct RateLimiter {
    state: Mutex<(f64, Instant)>,
    per_second: f64,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        RateLimiter {
            state: Mutex::new((1.0, Instant::now())),
            per_second,
        }
    }

    /// Blocks until a token is available. Capacity is a single token, so
    /// calls are paced at the configured rate with no initial burst.
    pub fn acquire(&self) {
        if self.per_second <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(s.1).as_secs_f64();
                s.0 = (s.0 + elapsed * self.per_second).min(1.0);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(0.25)));
        }
    }
}

/// Retry policy for remote calls.
#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(attempt as i32))
    }
}

/// Walks a dotted path (numeric segments index arrays) through a JSON value.
pub fn json_path<'a>(value: &'a serde_json::Value, path: &str) -> Option<&'a serde_json::Value> {
    let mut cur = value;
    for seg in path.split('.') {
        cur = match seg.parse::<usize>() {
            Ok(idx) => cur.get(idx)?,
            Err(_) => cur.get(seg)?,
        };
    }
    Some(cur)
}

/// HTTP client against a `GET <base>?latitude=..&longitude=..&format=json`
/// service whose response carries a county FIPS at a configurable JSON path.
pub struct RemoteResolver {
    client: reqwest::blocking::Client,
    base_url: String,
    fips_path: String,
    retry: RetryPolicy,
    limiter: RateLimiter,
    calls: AtomicU64,
}

impl RemoteResolver {
    pub fn new(base_url: impl Into<String>, fips_path: impl Into<String>, retry: RetryPolicy, per_second: f64) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(RemoteResolver {
            client,
            base_url: base_url.into(),
            fips_path: fips_path.into(),
            retry,
            limiter: RateLimiter::new(per_second),
            calls: AtomicU64::new(0),
        })
    }

    fn try_once(&self, point: &GeoPoint) -> std::result::Result<Resolution, (bool, String)> {
        self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let resp = self
            .client
            .get(&self.base_url)
            .query(&[
                ("latitude", point.latitude.to_string()),
                ("longitude", point.longitude.to_string()),
                ("format", "json".to_string()),
            ])
            .send()
            .map_err(|e| (true, format!("transport error: {e}")))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, format!("retryable status {status}")));
        }
        if !status.is_success() {
            return Err((false, format!("status {status}")));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| (false, format!("invalid JSON body: {e}")))?;
        match json_path(&body, &self.fips_path) {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(serde_json::Value::String(s)) => FipsCode::new(s)
                .map(Some)
                .map_err(|e| (false, e.to_string())),
            Some(serde_json::Value::Number(n)) => {
                let code = n.as_u64().ok_or((false, format!("non-integer FIPS {n}")))?;
                FipsCode::from_u32(code as u32)
                    .map(Some)
                    .map_err(|e| (false, e.to_string()))
            }
            Some(other) => Err((false, format!("unexpected FIPS value {other}"))),
        }
    }
}

impl CountyResolver for RemoteResolver {
    fn resolve(&self, point: &GeoPoint) -> Result<Resolution> {
        let mut last = String::new();
        for attempt in 0..self.retry.attempts {
            match self.try_once(point) {
                Ok(r) => return Ok(r),
                Err((retryable, msg)) => {
                    last = msg;
                    if !retryable {
                        break;
                    }
                    if attempt + 1 < self.retry.attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(Error::ResolutionFailed(format!(
            "({}, {}): {last}",
            point.latitude, point.longitude
        )))
    }

    fn remote_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Persistent cache wrapping another backend. Hits never touch the inner
/// resolver; misses are resolved, recorded in memory and appended to the
/// cache file. "No county" results are memoized for the process lifetime
/// only, so the persistent file holds real FIPS entries exclusively.
pub struct CachedResolver<R> {
    inner: R,
    map: Mutex<HashMap<(i64, i64), FipsCode>>,
    misses_seen: Mutex<HashSet<(i64, i64)>>,
    writer: Mutex<Option<BufWriter<File>>>,
    path: Option<PathBuf>,
    hits: AtomicU64,
}

impl<R: CountyResolver> CachedResolver<R> {
    /// In-memory cache only.
    pub fn new(inner: R) -> Self {
        CachedResolver {
            inner,
            map: Mutex::new(HashMap::new()),
            misses_seen: Mutex::new(HashSet::new()),
            writer: Mutex::new(None),
            path: None,
            hits: AtomicU64::new(0),
        }
    }

    /// Cache backed by an append-only JSON-Lines file. Existing entries are
    /// loaded first (last entry per key wins); when duplicates are found the
    /// file is compacted in place.
    pub fn with_file(inner: R, path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        let mut total = 0usize;
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                total += 1;
                let entry: GeoCacheEntry = serde_json::from_str(&line).map_err(|e| {
                    Error::Validation(format!("{}: bad cache line: {e}", path.display()))
                })?;
                map.insert((entry.lat_e4, entry.lon_e4), entry.fips);
            }
        }
        if total > map.len() {
            // compaction: rewrite one entry per key
            let file =
                File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut w = BufWriter::new(file);
            let mut keys: Vec<_> = map.keys().copied().collect();
            keys.sort_unstable();
            for (lat_e4, lon_e4) in keys {
                let entry = GeoCacheEntry {
                    lat_e4,
                    lon_e4,
                    fips: map[&(lat_e4, lon_e4)].clone(),
                    ts: now_secs(),
                };
                writeln!(w, "{}", serde_json::to_string(&entry).unwrap())
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(CachedResolver {
            inner,
            map: Mutex::new(map),
            misses_seen: Mutex::new(HashSet::new()),
            writer: Mutex::new(Some(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
            hits: AtomicU64::new(0),
        })
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(w) = self.writer.lock().unwrap().as_mut() {
            w.flush().map_err(|e| {
                Error::io(
                    self.path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                    e,
                )
            })?;
        }
        Ok(())
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl<R: CountyResolver> CountyResolver for CachedResolver<R> {
    fn resolve(&self, point: &GeoPoint) -> Result<Resolution> {
        let key = point.quantize();
        if let Some(fips) = self.map.lock().unwrap().get(&key).cloned() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(fips));
        }
        if self.misses_seen.lock().unwrap().contains(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(None);
        }
        match self.inner.resolve(point)? {
            Some(fips) => {
                self.map.lock().unwrap().insert(key, fips.clone());
                if let Some(w) = self.writer.lock().unwrap().as_mut() {
                    let entry = GeoCacheEntry {
                        lat_e4: key.0,
                        lon_e4: key.1,
                        fips: fips.clone(),
                        ts: now_secs(),
                    };
                    let _ = writeln!(w, "{}", serde_json::to_string(&entry).unwrap());
                }
                Ok(Some(fips))
            }
            None => {
                self.misses_seen.lock().unwrap().insert(key);
                Ok(None)
            }
        }
    }

    fn remote_calls(&self) -> u64 {
        self.inner.remote_calls()
    }
}

/// Per-batch resolution counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub resolved: usize,
    pub no_county: usize,
    pub failed: usize,
}

/// Fills `fips` on every record, or flags it unresolvable. Per-record
/// failures are collected rather than aborting the batch. Work is spread over
/// up to `concurrency` worker threads; results merge back in input order.
pub fn annotate_dataset(
    records: &mut [ImageRecord],
    resolver: &dyn CountyResolver,
    concurrency: usize,
) -> (AnnotateReport, Vec<(String, String)>) {
    let concurrency = concurrency.max(1);
    let n = records.len();
    let mut outcomes: Vec<Option<Result<Resolution>>> = Vec::with_capacity(n);
    outcomes.resize_with(n, || None);
    let outcomes = Mutex::new(outcomes);
    let next = AtomicU64::new(0);

    std::thread::scope(|scope| {
        for _ in 0..concurrency.min(n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed) as usize;
                if i >= n {
                    break;
                }
                let point = records[i].point;
                let res = resolver.resolve(&point);
                outcomes.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let mut report = AnnotateReport::default();
    let mut failures = Vec::new();
    for (record, outcome) in records.iter_mut().zip(outcomes.into_inner().unwrap()) {
        match outcome.expect("every index visited") {
            Ok(Some(fips)) => {
                record.fips = Some(fips);
                report.resolved += 1;
            }
            Ok(None) => {
                record.fips = None;
                report.no_county += 1;
            }
            Err(e) => {
                record.fips = None;
                report.failed += 1;
                failures.push((record.id.clone(), e.to_string()));
            }
        }
    }
    (report, failures)
}
