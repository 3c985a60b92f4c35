//! Proof verification: submit standalone Lean4 sources to an external
//! verification server in batches, classify compiler outcomes into verdicts,
//! cache verdicts by source hash (persisted per run), and aggregate
//! per-candidate verification status under the faithfulness gate.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formalize::{CheckerMode, Translation};
use crate::prove::source_hash;

/// Outcome class for one proof attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Timeout,
    Skipped,
}

/// What the verifier said about one source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    /// Compiler errors/warnings ("severity: message") or guard diagnostics.
    pub diagnostics: Vec<String>,
    pub wall_time_ms: u64,
}

/// Per-candidate aggregation over all proof attempts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateVerification {
    pub problem_id: String,
    pub candidate_index: usize,
    /// True iff at least one attempt passed AND the translation's
    /// faithfulness admits verification under the configured checker.
    pub verified: bool,
    /// Lowest-index passing attempt, recorded even when gating keeps
    /// `verified` false.
    pub passing_attempt: Option<usize>,
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("verifier transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("verifier protocol error: {excerpt}")]
    Protocol { excerpt: String },
    #[error("invalid verification request: {0}")]
    InvalidRequest(String),
}

/// One item of the request array: `[{custom_id, proof}, …]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRequestItem {
    pub custom_id: String,
    pub proof: String,
}

/// One item of the response array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyResponseItem {
    pub custom_id: String,
    pub pass: bool,
    pub complete: bool,
    #[serde(default)]
    pub errors: Vec<WireDiagnostic>,
    /// Wall time in seconds, when the server reports it.
    #[serde(default)]
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireDiagnostic {
    pub severity: String,
    pub message: String,
}

/// Verification server settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub endpoint_url: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Per-proof wall-time limit (seconds): at or above it, the verdict is a
    /// timeout.
    #[serde(default = "default_limit_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_http_timeout_secs")]
    pub http_timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    /// Treat `native_decide` as a trust bypass and fail the attempt.
    #[serde(default = "default_true")]
    pub reject_native_decide: bool,
}

fn default_batch_size() -> usize {
    8
}
fn default_limit_secs() -> u64 {
    60
}
fn default_http_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_true() -> bool {
    true
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.batch_size == 0 {
            return Err(VerifyError::InvalidRequest(
                "verifier batch_size must be >= 1".into(),
            ));
        }
        if let Some(rest) = self.endpoint_url.strip_prefix("mock://") {
            if rest.is_empty() {
                return Err(VerifyError::InvalidRequest(
                    "mock:// verifier endpoint needs a script path".into(),
                ));
            }
        } else {
            reqwest::Url::parse(&self.endpoint_url).map_err(|e| {
                VerifyError::InvalidRequest(format!(
                    "verifier endpoint_url {:?} is not a valid URL: {e}",
                    self.endpoint_url
                ))
            })?;
        }
        Ok(())
    }
}

/// Classify one server response item against the submitted source.
///
/// Guard first: placeholder or bypass tokens in the source force a fail
/// regardless of what the server said. Then timeouts, then the pass rule
/// (compile passed + complete + no error-severity diagnostics).
pub fn classify(
    item: &VerifyResponseItem,
    source: &str,
    limit: Duration,
    reject_native_decide: bool,
) -> Verdict {
    let wall_time_ms = item
        .time
        .map(|t| (t * 1000.0).round().max(0.0) as u64)
        .unwrap_or(0);
    let placeholder = regex::Regex::new(r"\b(sorry|admit)\b").expect("static regex");
    let bypassed = placeholder.is_match(source)
        || (reject_native_decide && source.contains("native_decide"));
    if bypassed {
        return Verdict {
            status: VerdictStatus::Fail,
            diagnostics: vec!["placeholder-or-bypass".into()],
            wall_time_ms,
        };
    }
    if item.time.is_some_and(|t| t >= limit.as_secs_f64()) {
        return Verdict {
            status: VerdictStatus::Timeout,
            diagnostics: vec![format!(
                "exceeded per-proof limit of {}s",
                limit.as_secs_f64()
            )],
            wall_time_ms,
        };
    }
    let diagnostics: Vec<String> = item
        .errors
        .iter()
        .map(|d| format!("{}: {}", d.severity, d.message))
        .collect();
    let has_error = item
        .errors
        .iter()
        .any(|d| d.severity.eq_ignore_ascii_case("error"));
    if item.pass && item.complete && !has_error {
        Verdict {
            status: VerdictStatus::Pass,
            diagnostics,
            wall_time_ms,
        }
    } else {
        Verdict {
            status: VerdictStatus::Fail,
            diagnostics: if diagnostics.is_empty() {
                vec!["compilation failed".into()]
            } else {
                diagnostics
            },
            wall_time_ms,
        }
    }
}

/// One round trip to a verification server. Implementations do exactly one
/// attempt; [`Verifier`] owns retries, batching, caching, and classification.
pub trait VerifyTransport: Send + Sync {
    fn submit(&self, items: &[VerifyRequestItem]) -> Result<Vec<VerifyResponseItem>, VerifyError>;
}

/// HTTP transport: POST the request array as JSON to the endpoint.
pub struct HttpVerifyTransport {
    http: reqwest::blocking::Client,
    endpoint: String,
    timeout: Duration,
}

impl HttpVerifyTransport {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        HttpVerifyTransport {
            http: reqwest::blocking::Client::new(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            timeout,
        }
    }
}

fn excerpt_of(s: &str) -> String {
    const LIMIT: usize = 200;
    if s.len() <= LIMIT {
        s.to_string()
    } else {
        let mut end = LIMIT;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

impl VerifyTransport for HttpVerifyTransport {
    fn submit(&self, items: &[VerifyRequestItem]) -> Result<Vec<VerifyResponseItem>, VerifyError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .timeout(self.timeout)
            .json(items)
            .send()
            .map_err(|e| VerifyError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| VerifyError::Transport {
            attempts: 1,
            message: format!("reading body: {e}"),
        })?;
        if status.is_server_error() {
            return Err(VerifyError::Transport {
                attempts: 1,
                message: format!("server status {status}"),
            });
        }
        if !status.is_success() {
            return Err(VerifyError::Protocol {
                excerpt: format!("status {status}: {}", excerpt_of(&text)),
            });
        }
        serde_json::from_str(&text).map_err(|e| VerifyError::Protocol {
            excerpt: format!("unexpected shape ({e}): {}", excerpt_of(&text)),
        })
    }
}

/// Rule-based mock transport (also loadable from a `mock://` script file).
#[derive(Debug, Clone, Deserialize)]
pub struct VerifyMockRule {
    /// Substrings that must all appear in the submitted source.
    #[serde(default)]
    pub contains: Vec<String>,
    pub pass: bool,
    pub complete: bool,
    #[serde(default)]
    pub errors: Vec<WireDiagnosticSpec>,
    #[serde(default)]
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct WireDiagnosticSpec {
    pub severity: String,
    pub message: String,
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct VerifyMockSpec {
    #[serde(default)]
    pub rules: Vec<VerifyMockRule>,
    #[serde(default)]
    pub default: Option<VerifyMockRule>,
    /// custom_ids the mock server "crashes" on: they are silently dropped
    /// from responses.
    #[serde(default)]
    pub drop_ids: Vec<String>,
}

pub struct MockVerifyTransport {
    spec: VerifyMockSpec,
    submissions: Mutex<u32>,
}

impl MockVerifyTransport {
    pub fn new(spec: VerifyMockSpec) -> Self {
        MockVerifyTransport {
            spec,
            submissions: Mutex::new(0),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, VerifyError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            VerifyError::InvalidRequest(format!("verifier mock script {}: {e}", path.display()))
        })?;
        let spec: VerifyMockSpec = serde_json::from_str(&text).map_err(|e| {
            VerifyError::InvalidRequest(format!("verifier mock script {}: {e}", path.display()))
        })?;
        Ok(MockVerifyTransport::new(spec))
    }

    /// Number of submit round trips performed.
    pub fn submissions(&self) -> u32 {
        *self.submissions.lock().expect("submissions lock")
    }
}

impl VerifyTransport for MockVerifyTransport {
    fn submit(&self, items: &[VerifyRequestItem]) -> Result<Vec<VerifyResponseItem>, VerifyError> {
        *self.submissions.lock().expect("submissions lock") += 1;
        let mut out = Vec::new();
        for item in items {
            if self.spec.drop_ids.contains(&item.custom_id) {
                continue;
            }
            let rule = self
                .spec
                .rules
                .iter()
                .find(|r| r.contains.iter().all(|c| item.proof.contains(c)))
                .or(self.spec.default.as_ref());
            let Some(rule) = rule else {
                continue;
            };
            out.push(VerifyResponseItem {
                custom_id: item.custom_id.clone(),
                pass: rule.pass,
                complete: rule.complete,
                errors: rule
                    .errors
                    .iter()
                    .map(|d| WireDiagnostic {
                        severity: d.severity.clone(),
                        message: d.message.clone(),
                    })
                    .collect(),
                time: rule.time,
            });
        }
        Ok(out)
    }
}

/// Batching, retrying, caching front of a verification server.
pub struct Verifier {
    cfg: VerifierConfig,
    transport: Arc<dyn VerifyTransport>,
    cache: Mutex<HashMap<String, Verdict>>,
    cache_path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    hash: String,
    verdict: Verdict,
}

impl Verifier {
    pub fn new(cfg: VerifierConfig, transport: Arc<dyn VerifyTransport>) -> Result<Self, VerifyError> {
        cfg.validate()?;
        Ok(Verifier {
            cfg,
            transport,
            cache: Mutex::new(HashMap::new()),
            cache_path: None,
        })
    }

    /// Build the transport from the config: `mock://<path>` loads a rule
    /// script (relative to `base_dir`), anything else speaks HTTP.
    pub fn from_config(cfg: VerifierConfig, base_dir: &Path) -> Result<Self, VerifyError> {
        cfg.validate()?;
        let transport: Arc<dyn VerifyTransport> =
            if let Some(rest) = cfg.endpoint_url.strip_prefix("mock://") {
                Arc::new(MockVerifyTransport::from_path(&base_dir.join(rest))?)
            } else {
                Arc::new(HttpVerifyTransport::new(
                    &cfg.endpoint_url,
                    Duration::from_secs(cfg.http_timeout_secs),
                ))
            };
        Self::new(cfg, transport)
    }

    /// Attach a persistent verdict cache (JSONL of {hash, verdict}); loads
    /// any existing entries, skipping unparseable lines (a cache is
    /// reconstructible, unlike the run log).
    pub fn with_cache_file(mut self, path: PathBuf) -> Self {
        if let Ok(text) = std::fs::read_to_string(&path) {
            let mut cache = self.cache.lock().expect("cache lock");
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(entry) => {
                        cache.insert(entry.hash, entry.verdict);
                    }
                    Err(e) => tracing::warn!("skipping unparseable verdict-cache line: {e}"),
                }
            }
        }
        self.cache_path = Some(path);
        self
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.cfg
    }

    fn persist(&self, hash: &str, verdict: &Verdict) {
        let Some(path) = &self.cache_path else { return };
        let line = serde_json::to_string(&CacheLine {
            hash: hash.to_string(),
            verdict: verdict.clone(),
        })
        .expect("verdict serializes");
        let appended = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| {
                use std::io::Write;
                writeln!(f, "{line}")
            });
        if let Err(e) = appended {
            tracing::warn!("could not persist verdict cache entry: {e}");
        }
    }

    fn submit_with_retries(
        &self,
        items: &[VerifyRequestItem],
    ) -> Result<Vec<VerifyResponseItem>, VerifyError> {
        let attempts_allowed = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts_allowed {
            if attempt > 0 {
                let backoff = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.transport.submit(items) {
                Ok(out) => return Ok(out),
                Err(VerifyError::Transport { message, .. }) => {
                    tracing::debug!(attempt, "verifier transport failure: {message}");
                    last = message;
                }
                Err(other) => return Err(other),
            }
        }
        Err(VerifyError::Transport {
            attempts: attempts_allowed,
            message: last,
        })
    }

    /// Verify a set of (id, source) pairs. Every input id appears exactly
    /// once in the output. Cached sources are answered without contacting
    /// the server; per-item server crashes (id missing from the response)
    /// yield fail verdicts with a "server-error" diagnostic, uncached so a
    /// rerun can retry them.
    pub fn verify_batch(
        &self,
        sources: &[(String, String)],
    ) -> Result<BTreeMap<String, Verdict>, VerifyError> {
        if sources.is_empty() {
            return Err(VerifyError::InvalidRequest(
                "verify_batch needs at least one source".into(),
            ));
        }
        {
            let mut seen = std::collections::BTreeSet::new();
            for (id, _) in sources {
                if !seen.insert(id) {
                    return Err(VerifyError::InvalidRequest(format!(
                        "duplicate custom_id {id:?}"
                    )));
                }
            }
        }
        let limit = Duration::from_secs(self.cfg.timeout_secs);
        let mut out: BTreeMap<String, Verdict> = BTreeMap::new();
        let mut misses: Vec<(&String, &String, String)> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for (id, source) in sources {
                let hash = source_hash(source);
                match cache.get(&hash) {
                    Some(verdict) => {
                        out.insert(id.clone(), verdict.clone());
                    }
                    None => misses.push((id, source, hash)),
                }
            }
        }
        for batch in misses.chunks(self.cfg.batch_size) {
            let items: Vec<VerifyRequestItem> = batch
                .iter()
                .map(|(id, source, _)| VerifyRequestItem {
                    custom_id: (*id).clone(),
                    proof: (*source).clone(),
                })
                .collect();
            let responses = self.submit_with_retries(&items)?;
            let by_id: HashMap<&str, &VerifyResponseItem> = responses
                .iter()
                .map(|r| (r.custom_id.as_str(), r))
                .collect();
            for (id, source, hash) in batch {
                match by_id.get(id.as_str()) {
                    Some(item) => {
                        let verdict =
                            classify(item, source, limit, self.cfg.reject_native_decide);
                        self.cache
                            .lock()
                            .expect("cache lock")
                            .insert(hash.clone(), verdict.clone());
                        self.persist(hash, &verdict);
                        out.insert((*id).clone(), verdict);
                    }
                    None => {
                        out.insert(
                            (*id).clone(),
                            Verdict {
                                status: VerdictStatus::Fail,
                                diagnostics: vec!["server-error".into()],
                                wall_time_ms: 0,
                            },
                        );
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fold attempt verdicts into one per-candidate verification status.
pub fn aggregate(
    translation: &Translation,
    verdicts: &[(usize, Verdict)],
    checker: CheckerMode,
) -> CandidateVerification {
    let passing_attempt = verdicts
        .iter()
        .filter(|(_, v)| v.status == VerdictStatus::Pass)
        .map(|(index, _)| *index)
        .min();
    CandidateVerification {
        problem_id: translation.problem_id.clone(),
        candidate_index: translation.candidate_index,
        verified: passing_attempt.is_some()
            && translation.faithfulness.admits_verification(checker),
        passing_attempt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formalize::{Faithfulness, TranslationMode};
    use crate::testutil::{http_ok, http_unavailable, tiny_http_server};

    fn item(pass: bool, complete: bool, errors: &[(&str, &str)], time: Option<f64>) -> VerifyResponseItem {
        VerifyResponseItem {
            custom_id: "x".into(),
            pass,
            complete,
            errors: errors
                .iter()
                .map(|(s, m)| WireDiagnostic {
                    severity: (*s).into(),
                    message: (*m).into(),
                })
                .collect(),
            time,
        }
    }

    const LIMIT: Duration = Duration::from_secs(60);

    #[test]
    fn clean_compiles_pass() {
        let v = classify(&item(true, true, &[], Some(2.5)), "theorem ok := by norm_num", LIMIT, true);
        assert_eq!(v.status, VerdictStatus::Pass);
        assert_eq!(v.wall_time_ms, 2500);
        assert!(v.diagnostics.is_empty());
    }

    #[test]
    fn compiler_errors_fail_with_diagnostics() {
        let v = classify(
            &item(false, true, &[("error", "unknown identifier foo")], None),
            "theorem bad := by foo",
            LIMIT,
            true,
        );
        assert_eq!(v.status, VerdictStatus::Fail);
        assert_eq!(v.diagnostics, vec!["error: unknown identifier foo".to_string()]);
    }

    #[test]
    fn warnings_do_not_block_a_pass() {
        let v = classify(
            &item(true, true, &[("warning", "unused variable h")], None),
            "theorem ok (h : 1 = 1) : 2 = 2 := by norm_num",
            LIMIT,
            true,
        );
        assert_eq!(v.status, VerdictStatus::Pass);
        assert_eq!(v.diagnostics, vec!["warning: unused variable h".to_string()]);
    }

    #[test]
    fn error_severity_blocks_a_claimed_pass() {
        let v = classify(
            &item(true, true, &[("error", "type mismatch")], None),
            "theorem sus := by simp",
            LIMIT,
            true,
        );
        assert_eq!(v.status, VerdictStatus::Fail);
    }

    #[test]
    fn placeholder_and_bypass_tokens_force_fail() {
        for source in [
            "theorem t : 1 = 1 := by sorry",
            "theorem t : 1 = 1 := by admit",
            "theorem t : 1 = 1 := by native_decide",
        ] {
            let v = classify(&item(true, true, &[], None), source, LIMIT, true);
            assert_eq!(v.status, VerdictStatus::Fail, "source: {source}");
            assert_eq!(v.diagnostics, vec!["placeholder-or-bypass".to_string()]);
        }
        // The bypass guard is toggleable; the placeholder guard is not.
        let v = classify(
            &item(true, true, &[], None),
            "theorem t : 1 = 1 := by native_decide",
            LIMIT,
            false,
        );
        assert_eq!(v.status, VerdictStatus::Pass);
    }

    #[test]
    fn at_or_above_the_limit_is_a_timeout() {
        let v = classify(&item(false, false, &[], Some(60.0)), "theorem slow := by deep", LIMIT, true);
        assert_eq!(v.status, VerdictStatus::Timeout);
        assert!(v.wall_time_ms >= 60_000);
        let v = classify(&item(true, true, &[], Some(59.9)), "theorem fast := by quick", LIMIT, true);
        assert_eq!(v.status, VerdictStatus::Pass);
    }

    fn spec_json(json: &str) -> VerifyMockSpec {
        serde_json::from_str(json).unwrap()
    }

    fn verifier(spec: VerifyMockSpec, batch_size: usize) -> (Verifier, Arc<MockVerifyTransport>) {
        let transport = Arc::new(MockVerifyTransport::new(spec));
        let cfg = VerifierConfig {
            endpoint_url: "mock://inline".into(),
            batch_size,
            timeout_secs: 60,
            http_timeout_secs: 5,
            max_retries: 0,
            retry_backoff_ms: 1,
            reject_native_decide: true,
        };
        (
            Verifier::new(cfg, transport.clone()).unwrap(),
            transport,
        )
    }

    const PASS_ALL: &str = r#"{"default":{"pass":true,"complete":true,"time":1.0}}"#;

    #[test]
    fn batches_respect_the_configured_size_and_cover_every_id() {
        let (verifier, transport) = verifier(spec_json(PASS_ALL), 2);
        let sources: Vec<(String, String)> = (0..5)
            .map(|i| (format!("id-{i}"), format!("theorem t{i} : {i} = {i} := by rfl")))
            .collect();
        let out = verifier.verify_batch(&sources).unwrap();
        assert_eq!(out.len(), 5);
        assert!(sources.iter().all(|(id, _)| out.contains_key(id)));
        assert_eq!(transport.submissions(), 3); // ceil(5 / 2)
    }

    #[test]
    fn cache_answers_identical_sources_without_resubmission() {
        let (verifier, transport) = verifier(spec_json(PASS_ALL), 8);
        let sources = vec![("a".to_string(), "theorem t : 1 = 1 := by rfl".to_string())];
        let first = verifier.verify_batch(&sources).unwrap();
        assert_eq!(transport.submissions(), 1);
        let again = vec![("b".to_string(), "theorem t : 1 = 1 := by rfl".to_string())];
        let second = verifier.verify_batch(&again).unwrap();
        assert_eq!(transport.submissions(), 1, "cache hit must not resubmit");
        assert_eq!(first["a"], second["b"]);
    }

    #[test]
    fn cache_survives_a_verifier_restart_via_the_cache_file() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("verdicts.jsonl");
        let sources = vec![("a".to_string(), "theorem t : 2 = 2 := by rfl".to_string())];
        {
            let (v, t) = verifier(spec_json(PASS_ALL), 8);
            let v = v.with_cache_file(cache_path.clone());
            v.verify_batch(&sources).unwrap();
            assert_eq!(t.submissions(), 1);
        }
        let (v, t) = verifier(spec_json(PASS_ALL), 8);
        let v = v.with_cache_file(cache_path);
        let out = v.verify_batch(&sources).unwrap();
        assert_eq!(t.submissions(), 0, "persisted verdict must be reused");
        assert_eq!(out["a"].status, VerdictStatus::Pass);
    }

    #[test]
    fn dropped_ids_become_server_error_fails_and_are_not_cached() {
        let spec = spec_json(
            r#"{"default":{"pass":true,"complete":true},"drop_ids":["gone"]}"#,
        );
        let (verifier, transport) = verifier(spec, 8);
        let sources = vec![
            ("ok".to_string(), "theorem a : 1 = 1 := by rfl".to_string()),
            ("gone".to_string(), "theorem b : 2 = 2 := by rfl".to_string()),
        ];
        let out = verifier.verify_batch(&sources).unwrap();
        assert_eq!(out["ok"].status, VerdictStatus::Pass);
        assert_eq!(out["gone"].status, VerdictStatus::Fail);
        assert_eq!(out["gone"].diagnostics, vec!["server-error".to_string()]);
        // Not cached: the same source submits again next time.
        verifier
            .verify_batch(&[("gone2".to_string(), "theorem b : 2 = 2 := by rfl".to_string())])
            .unwrap();
        assert_eq!(transport.submissions(), 2);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let (verifier, _) = verifier(spec_json(PASS_ALL), 8);
        assert!(matches!(
            verifier.verify_batch(&[]),
            Err(VerifyError::InvalidRequest(_))
        ));
        let dup = vec![
            ("same".to_string(), "theorem a : 1 = 1 := by rfl".to_string()),
            ("same".to_string(), "theorem b : 2 = 2 := by rfl".to_string()),
        ];
        assert!(matches!(
            verifier.verify_batch(&dup),
            Err(VerifyError::InvalidRequest(_))
        ));
    }

    fn translation_with(faithfulness: Faithfulness) -> Translation {
        Translation {
            problem_id: "p-0".into(),
            candidate_index: 3,
            statement: Some("theorem t : 1 = 1 := by".into()),
            failure: None,
            cot: None,
            mode: TranslationMode::FewShot,
            faithfulness,
        }
    }

    fn verdict(status: VerdictStatus) -> Verdict {
        Verdict {
            status,
            diagnostics: vec![],
            wall_time_ms: 10,
        }
    }

    #[test]
    fn aggregation_takes_the_lowest_passing_attempt() {
        let cv = aggregate(
            &translation_with(Faithfulness::FaithfulExternal),
            &[
                (0, verdict(VerdictStatus::Fail)),
                (1, verdict(VerdictStatus::Pass)),
                (2, verdict(VerdictStatus::Pass)),
            ],
            CheckerMode::External,
        );
        assert!(cv.verified);
        assert_eq!(cv.passing_attempt, Some(1));
        assert_eq!(cv.candidate_index, 3);
    }

    #[test]
    fn aggregation_without_passes_is_unverified() {
        let cv = aggregate(
            &translation_with(Faithfulness::FaithfulExternal),
            &[
                (0, verdict(VerdictStatus::Fail)),
                (1, verdict(VerdictStatus::Timeout)),
            ],
            CheckerMode::External,
        );
        assert!(!cv.verified);
        assert_eq!(cv.passing_attempt, None);
    }

    #[test]
    fn faithfulness_gate_blocks_verification_but_keeps_the_pass() {
        let cv = aggregate(
            &translation_with(Faithfulness::Unfaithful),
            &[(0, verdict(VerdictStatus::Pass))],
            CheckerMode::External,
        );
        assert!(!cv.verified);
        assert_eq!(cv.passing_attempt, Some(0));

        let unchecked_off = aggregate(
            &translation_with(Faithfulness::Unchecked),
            &[(0, verdict(VerdictStatus::Pass))],
            CheckerMode::Off,
        );
        assert!(unchecked_off.verified);

        let unchecked_external = aggregate(
            &translation_with(Faithfulness::Unchecked),
            &[(0, verdict(VerdictStatus::Pass))],
            CheckerMode::External,
        );
        assert!(!unchecked_external.verified);
    }

    #[test]
    fn http_round_trip_retries_5xx_and_rejects_malformed_bodies() {
        let ok_body = r#"[{"custom_id":"a","pass":true,"complete":true,"time":0.8}]"#;
        let (endpoint, rx, handle) =
            tiny_http_server(vec![http_unavailable(), http_ok(ok_body)]);
        let cfg = VerifierConfig {
            endpoint_url: endpoint,
            batch_size: 8,
            timeout_secs: 60,
            http_timeout_secs: 5,
            max_retries: 2,
            retry_backoff_ms: 1,
            reject_native_decide: true,
        };
        let transport = Arc::new(HttpVerifyTransport::new(
            &cfg.endpoint_url,
            Duration::from_secs(5),
        ));
        let verifier = Verifier::new(cfg, transport).unwrap();
        let out = verifier
            .verify_batch(&[("a".to_string(), "theorem t : 1 = 1 := by rfl".to_string())])
            .unwrap();
        assert_eq!(out["a"].status, VerdictStatus::Pass);
        let request = rx.recv().unwrap();
        assert!(request.contains("\"custom_id\":\"a\""));
        assert!(request.contains("\"proof\":\"theorem t : 1 = 1 := by rfl\""));
        handle.join().unwrap();

        let (endpoint, _rx, handle) = tiny_http_server(vec![http_ok("{\"not\":\"an array\"}")]);
        let cfg = VerifierConfig {
            endpoint_url: endpoint.clone(),
            batch_size: 8,
            timeout_secs: 60,
            http_timeout_secs: 5,
            max_retries: 0,
            retry_backoff_ms: 1,
            reject_native_decide: true,
        };
        let transport = Arc::new(HttpVerifyTransport::new(&endpoint, Duration::from_secs(5)));
        let verifier = Verifier::new(cfg, transport).unwrap();
        let err = verifier
            .verify_batch(&[("a".to_string(), "theorem t : 1 = 1 := by rfl".to_string())])
            .unwrap_err();
        assert!(matches!(err, VerifyError::Protocol { .. }));
        handle.join().unwrap();
    }
}
