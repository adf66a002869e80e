//! Machine-tag acquisition from an auto-tagging service, plus the
//! confidence filter applied to its output.
//!
//! Two backends: a JSON-Lines fixture keyed by image id, and a remote HTTP
//! client with credential loading, retries and rate limiting. Unavailable
//! images are a status, not an error; whole-batch failures (bad credentials,
//! dead endpoint) abort.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{RateLimiter, RetryPolicy};
use crate::ingest::{ImageRecord, MachineTag};

/// Service-level outcome for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerStatus {
    Ok,
    /// The image is no longer available; carries no tags.
    ImageGone,
}

/// One image's tagging result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerResponse {
    pub id: String,
    pub status: TaggerStatus,
    #[serde(default)]
    pub tags: Vec<MachineTag>,
}

impl TaggerResponse {
    fn validate(self) -> Result<Self> {
        for t in &self.tags {
            if !(0.0..=100.0).contains(&t.confidence) || !t.confidence.is_finite() {
                return Err(Error::MalformedResponse(format!(
                    "image {:?}: confidence {} out of range [0,100]",
                    self.id, t.confidence
                )));
            }
        }
        if self.status == TaggerStatus::ImageGone && !self.tags.is_empty() {
            return Err(Error::MalformedResponse(format!(
                "image {:?}: gone but carries tags",
                self.id
            )));
        }
        Ok(self)
    }
}

/// Minimum confidence a tag must strictly exceed to survive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceThreshold(f64);

impl ConfidenceThreshold {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&value) || !value.is_finite() {
            return Err(Error::Validation(format!(
                "confidence threshold {value} out of range [0,100]"
            )));
        }
        Ok(ConfidenceThreshold(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for ConfidenceThreshold {
    fn default() -> Self {
        ConfidenceThreshold(20.0)
    }
}

/// Keeps tags whose confidence is strictly greater than the threshold,
/// preserving order.
pub fn filter_by_confidence(tags: &[MachineTag], threshold: ConfidenceThreshold) -> Vec<MachineTag> {
    tags.iter()
        .filter(|t| t.confidence > threshold.value())
        .cloned()
        .collect()
}

/// A tagging backend.
pub trait Tagger: Send + Sync {
    fn request_tags(&self, image_ref: &str) -> Result<TaggerResponse>;

    fn remote_calls(&self) -> u64 {
        0
    }
}

/// Fixture backend: JSON-Lines of TaggerResponse keyed by image id. Images
/// absent from the fixture are reported gone, mirroring how a dead URL
/// behaves against the real service.
#[derive(Debug)]
pub struct FixtureTagger {
    responses: HashMap<String, TaggerResponse>,
}

impl FixtureTagger {
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut responses = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let resp: TaggerResponse = serde_json::from_str(&line).map_err(|e| {
                Error::Validation(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            let resp = resp.validate()?;
            responses.insert(resp.id.clone(), resp);
        }
        Ok(FixtureTagger { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Tagger for FixtureTagger {
    fn request_tags(&self, image_ref: &str) -> Result<TaggerResponse> {
        Ok(self
            .responses
            .get(image_ref)
            .cloned()
            .unwrap_or_else(|| TaggerResponse {
                id: image_ref.to_string(),
                status: TaggerStatus::ImageGone,
                tags: vec![],
            }))
    }
}

/// Environment variable naming the file that holds the API credential.
pub const CREDENTIALS_ENV: &str = "GEOHEALTH_TAGGER_CREDENTIALS";

/// Reads the Authorization header value from the file named by
/// `GEOHEALTH_TAGGER_CREDENTIALS` (or an explicit override path).
pub fn load_credentials(path_override: Option<&Path>) -> Result<String> {
    let path = match path_override {
        Some(p) => p.to_path_buf(),
        None => std::env::var(CREDENTIALS_ENV)
            .map_err(|_| {
                Error::Config(format!(
                    "tagger credentials not configured: set {CREDENTIALS_ENV} to a credentials file path"
                ))
            })?
            .into(),
    };
    let raw = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read credentials file {}: {e}", path.display())))?;
    let cred = raw.trim();
    if cred.is_empty() {
        return Err(Error::Config(format!(
            "credentials file {} is empty",
            path.display()
        )));
    }
    Ok(cred.to_string())
}

/// Remote client: `GET <base>/tagging?url=<image_url>` with an Authorization
/// header. The response body is either a JSON array of {tag, confidence} or
/// an object with a `tags` array.
pub struct RemoteTagger {
    client: reqwest::blocking::Client,
    base_url: String,
    auth: String,
    /// Optional template mapping an image id to its URL; `{id}` is replaced.
    /// Without one the id is passed through as the url parameter.
    url_template: Option<String>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    calls: AtomicU64,
}

impl RemoteTagger {
    pub fn new(
        base_url: impl Into<String>,
        auth: String,
        url_template: Option<String>,
        retry: RetryPolicy,
        per_second: f64,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(RemoteTagger {
            client,
            base_url: base_url.into(),
            auth,
            url_template,
            retry,
            limiter: RateLimiter::new(per_second),
            calls: AtomicU64::new(0),
        })
    }

    fn image_url(&self, image_ref: &str) -> String {
        match &self.url_template {
            Some(t) => t.replace("{id}", image_ref),
            None => image_ref.to_string(),
        }
    }

    /// Ok(response) or Err((retryable, error)).
    fn try_once(&self, image_ref: &str) -> std::result::Result<TaggerResponse, (bool, Error)> {
        self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let url = format!("{}/tagging", self.base_url.trim_end_matches('/'));
        let resp = self
            .client
            .get(url)
            .header("Authorization", &self.auth)
            .query(&[("url", self.image_url(image_ref))])
            .send()
            .map_err(|e| {
                (
                    true,
                    Error::ServiceUnavailable(format!("tagger transport error: {e}")),
                )
            })?;
        let status = resp.status();
        match status.as_u16() {
            401 | 403 => {
                return Err((
                    false,
                    Error::AuthFailure(format!("tagger rejected credentials ({status})")),
                ))
            }
            404 | 410 => {
                return Ok(TaggerResponse {
                    id: image_ref.to_string(),
                    status: TaggerStatus::ImageGone,
                    tags: vec![],
                })
            }
            429 => {
                return Err((
                    true,
                    Error::ServiceUnavailable("tagger rate limit (429)".into()),
                ))
            }
            s if status.is_server_error() => {
                return Err((
                    true,
                    Error::ServiceUnavailable(format!("tagger status {s}")),
                ))
            }
            s if !status.is_success() => {
                return Err((
                    false,
                    Error::MalformedResponse(format!("tagger status {s} for {image_ref:?}")),
                ))
            }
            _ => {}
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| (false, Error::MalformedResponse(format!("invalid JSON: {e}"))))?;
        let arr = match &body {
            serde_json::Value::Array(a) => a,
            serde_json::Value::Object(o) => match o.get("tags") {
                Some(serde_json::Value::Array(a)) => a,
                _ => {
                    return Err((
                        false,
                        Error::MalformedResponse(format!("no tags array for {image_ref:?}")),
                    ))
                }
            },
            _ => {
                return Err((
                    false,
                    Error::MalformedResponse(format!("unexpected body for {image_ref:?}")),
                ))
            }
        };
        let mut tags = Vec::with_capacity(arr.len());
        for item in arr {
            let tag = item
                .get("tag")
                .and_then(|v| v.as_str())
                .ok_or_else(|| (false, Error::MalformedResponse("tag missing".into())))?;
            let confidence = item
                .get("confidence")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| (false, Error::MalformedResponse("confidence missing".into())))?;
            tags.push(MachineTag { tag: tag.to_string(), confidence });
        }
        TaggerResponse {
            id: image_ref.to_string(),
            status: TaggerStatus::Ok,
            tags,
        }
        .validate()
        .map_err(|e| (false, e))
    }
}

impl Tagger for RemoteTagger {
    fn request_tags(&self, image_ref: &str) -> Result<TaggerResponse> {
        let mut last: Option<Error> = None;
        for attempt in 0..self.retry.attempts {
            match self.try_once(image_ref) {
                Ok(r) => return Ok(r),
                Err((retryable, e)) => {
                    let fatal = !retryable;
                    last = Some(e);
                    if fatal {
                        break;
                    }
                    if attempt + 1 < self.retry.attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::ServiceUnavailable("tagger: no attempts".into())))
    }

    fn remote_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Per-batch tagging counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub tagged: usize,
    pub gone_kept: usize,
    pub gone_dropped: usize,
    pub failed: usize,
}

/// Requests tags for every record and merges results back by image id.
/// Unfiltered confidences are stored; thresholding happens at featurization.
/// Gone images stay only if they carry user tags, otherwise they are dropped.
/// Credential and availability failures abort the batch; anything else is
/// recorded per image and the record dropped.
#[allow(clippy::type_complexity)]
pub fn annotate_tags(
    records: Vec<ImageRecord>,
    tagger: &dyn Tagger,
    concurrency: usize,
) -> Result<(Vec<ImageRecord>, TagReport, Vec<(String, String)>)> {
    let concurrency = concurrency.max(1);
    let n = records.len();
    let mut outcomes: Vec<Option<Result<TaggerResponse>>> = Vec::with_capacity(n);
    outcomes.resize_with(n, || None);
    let outcomes = Mutex::new(outcomes);
    let next = AtomicU64::new(0);
    let abort = AtomicBool::new(false);

    std::thread::scope(|scope| {
        for _ in 0..concurrency.min(n.max(1)) {
            scope.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed) as usize;
                if i >= n {
                    break;
                }
                let res = tagger.request_tags(&records[i].id);
                if matches!(
                    res,
                    Err(Error::AuthFailure(_)) | Err(Error::ServiceUnavailable(_))
                ) {
                    abort.store(true, Ordering::Relaxed);
                }
                outcomes.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let outcomes = outcomes.into_inner().unwrap();
    // batch-fatal errors take precedence over per-image bookkeeping
    for outcome in outcomes.iter().flatten() {
        if let Err(e @ (Error::AuthFailure(_) | Error::ServiceUnavailable(_))) = outcome {
            return Err(match e {
                Error::AuthFailure(m) => Error::AuthFailure(m.clone()),
                _ => Error::ServiceUnavailable(match e {
                    Error::ServiceUnavailable(m) => m.clone(),
                    _ => unreachable!(),
                }),
            });
        }
    }

    let mut report = TagReport::default();
    let mut failures = Vec::new();
    let mut kept = Vec::with_capacity(n);
    for (mut record, outcome) in records.into_iter().zip(outcomes) {
        match outcome.expect("every index visited") {
            Ok(resp) => match resp.status {
                TaggerStatus::Ok => {
                    record.machine_tags = resp.tags;
                    report.tagged += 1;
                    kept.push(record);
                }
                TaggerStatus::ImageGone => {
                    record.machine_tags.clear();
                    if record.has_user_tags() {
                        report.gone_kept += 1;
                        kept.push(record);
                    } else {
                        report.gone_dropped += 1;
                    }
                }
            },
            Err(e) => {
                report.failed += 1;
                failures.push((record.id.clone(), e.to_string()));
            }
        }
    }
    Ok((kept, report, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use std::io::Write as _;

    fn tag(t: &str, c: f64) -> MachineTag {
        MachineTag::new(t, c).unwrap()
    }

    fn fixture(dir: &Path, lines: &[&str]) -> FixtureTagger {
        let path = dir.join("tags.jsonl");
        let mut f = File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        FixtureTagger::from_path(&path).unwrap()
    }

    #[test]
    fn fixture_returns_authored_list_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let tagger = fixture(
            dir.path(),
            &[r#"{"id":"a","status":"ok","tags":[{"tag":"food","confidence":53.7},{"tag":"glass","confidence":12.0}]}"#],
        );
        let resp = tagger.request_tags("a").unwrap();
        assert_eq!(resp.status, TaggerStatus::Ok);
        assert_eq!(resp.tags, vec![tag("food", 53.7), tag("glass", 12.0)]);
    }

    #[test]
    fn deleted_image_is_gone_with_no_tags() {
        let dir = tempfile::tempdir().unwrap();
        let tagger = fixture(dir.path(), &[r#"{"id":"a","status":"image_gone"}"#]);
        let resp = tagger.request_tags("a").unwrap();
        assert_eq!(resp.status, TaggerStatus::ImageGone);
        assert!(resp.tags.is_empty());
    }

    #[test]
    fn out_of_range_confidence_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"a","status":"ok","tags":[{"tag":"x","confidence":120.0}]}"#,
        )
        .unwrap();
        let err = FixtureTagger::from_path(&path).unwrap_err();
        assert!(matches!(err, Error::MalformedResponse(_)), "{err}");
    }

    #[test]
    fn filter_keeps_strictly_above_threshold() {
        let t20 = ConfidenceThreshold::new(20.0).unwrap();
        assert_eq!(
            filter_by_confidence(&[tag("food", 53.7), tag("glass", 12.0)], t20),
            vec![tag("food", 53.7)]
        );
        assert_eq!(filter_by_confidence(&[tag("glass", 20.0)], t20), vec![]);
        assert_eq!(filter_by_confidence(&[], t20), vec![]);
    }

    #[test]
    fn filter_is_monotone_and_idempotent() {
        let tags = vec![
            tag("a", 5.0),
            tag("b", 19.999),
            tag("c", 20.0),
            tag("d", 20.001),
            tag("e", 99.0),
        ];
        let mut prev = tags.clone();
        for t in [0.0, 10.0, 20.0, 50.0, 100.0] {
            let th = ConfidenceThreshold::new(t).unwrap();
            let cur = filter_by_confidence(&tags, th);
            assert!(cur.iter().all(|x| prev.contains(x)), "threshold {t} grew the set");
            assert_eq!(filter_by_confidence(&cur, th), cur);
            prev = cur;
        }
    }

    #[test]
    fn default_threshold_is_twenty() {
        assert_eq!(ConfidenceThreshold::default().value(), 20.0);
    }

    fn record(id: &str, user_tags: &[&str]) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            point: GeoPoint::new(33.7, -84.4).unwrap(),
            timestamp: 0,
            user_tags: user_tags.iter().map(|s| s.to_string()).collect(),
            machine_tags: vec![],
            fips: None,
        }
    }

    #[test]
    fn annotate_merges_by_id_and_applies_drop_policy() {
        let dir = tempfile::tempdir().unwrap();
        let tagger = fixture(
            dir.path(),
            &[
                r#"{"id":"a","status":"ok","tags":[{"tag":"food","confidence":53.7}]}"#,
                r#"{"id":"b","status":"image_gone"}"#,
                r#"{"id":"c","status":"image_gone"}"#,
            ],
        );
        let records = vec![record("a", &[]), record("b", &["sunset"]), record("c", &[])];
        let (kept, report, failures) = annotate_tags(records, &tagger, 3).unwrap();
        assert!(failures.is_empty());
        assert_eq!(
            report,
            TagReport { tagged: 1, gone_kept: 1, gone_dropped: 1, failed: 0 }
        );
        let ids: Vec<&str> = kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(kept[0].machine_tags, vec![tag("food", 53.7)]);
        assert!(kept[1].machine_tags.is_empty());
    }

    #[test]
    fn annotate_is_deterministic_across_concurrency() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..40)
            .map(|i| {
                format!(
                    r#"{{"id":"img{i}","status":"ok","tags":[{{"tag":"t{i}","confidence":{}}}]}}"#,
                    30 + (i % 50)
                )
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let tagger = fixture(dir.path(), &refs);
        let records: Vec<ImageRecord> =
            (0..40).map(|i| record(&format!("img{i}"), &[])).collect();
        let (kept1, ..) = annotate_tags(records.clone(), &tagger, 1).unwrap();
        let (kept8, ..) = annotate_tags(records, &tagger, 8).unwrap();
        assert_eq!(kept1, kept8);
    }

    #[test]
    fn missing_credentials_env_is_config_error() {
        std::env::remove_var(CREDENTIALS_ENV);
        let err = load_credentials(None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn credentials_file_is_trimmed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cred");
        std::fs::write(&path, "Basic abc123\n").unwrap();
        assert_eq!(load_credentials(Some(&path)).unwrap(), "Basic abc123");
    }
}
