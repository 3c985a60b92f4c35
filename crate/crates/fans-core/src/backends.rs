//! LLM backend plumbing: one chat-completions wire contract shared by every
//! role (sampler, translator, judge, prover, reward model), a bounded retry
//! policy, request fingerprints, call transcripts, and deterministic mocks.
//!
//! Secrets never travel through this module's data: configs carry the *name*
//! of the environment variable holding an API key, and transcripts record
//! request fingerprints, never headers.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The five backend roles a run can wire up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sampler,
    Translator,
    Judge,
    Prover,
    Reward,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Sampler => "sampler",
            Role::Translator => "translator",
            Role::Judge => "judge",
            Role::Prover => "prover",
            Role::Reward => "reward",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decoding parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub n_samples: u32,
}

impl SamplingParams {
    /// Per-role defaults: sampler (0.6/4096/n), translator (0.0/2048/1),
    /// prover (1.0/2048/k); judge and reward are greedy single-shot.
    pub fn default_for(role: Role, n_samples: u32, k_proof_attempts: u32) -> Self {
        match role {
            Role::Sampler => SamplingParams {
                temperature: 0.6,
                max_new_tokens: 4096,
                n_samples,
            },
            Role::Translator => SamplingParams {
                temperature: 0.0,
                max_new_tokens: 2048,
                n_samples: 1,
            },
            Role::Prover => SamplingParams {
                temperature: 1.0,
                max_new_tokens: 2048,
                n_samples: k_proof_attempts,
            },
            Role::Judge => SamplingParams {
                temperature: 0.0,
                max_new_tokens: 2048,
                n_samples: 1,
            },
            Role::Reward => SamplingParams {
                temperature: 0.0,
                max_new_tokens: 64,
                n_samples: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Configuration(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::Configuration(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(BackendError::Configuration(
                "n_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

/// One chat message on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

/// How a reward score is read out of a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreExtraction {
    /// Trimmed completion text parsed as one float.
    #[default]
    CompletionText,
    /// First float token anywhere in the completion.
    CompletionFirstNumber,
    /// A top-level response field (number, or first element of an array).
    ResponseField { field: String },
}

fn default_max_retries() -> u32 {
    2
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_in_flight_cap() -> usize {
    8
}

/// Everything needed to talk to one endpoint in one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub role: Role,
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key — never the key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub sampling: SamplingParams,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    /// Upper bound on concurrent requests to this endpoint.
    #[serde(default = "default_in_flight_cap")]
    pub in_flight_cap: usize,
    #[serde(default)]
    pub score_extraction: ScoreExtraction,
}

impl RoleConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.model_name.is_empty() {
            return Err(BackendError::Configuration(format!(
                "{} role: model_name must be nonempty",
                self.role
            )));
        }
        if let Some(rest) = self.endpoint_url.strip_prefix("mock://") {
            if rest.is_empty() {
                return Err(BackendError::Configuration(format!(
                    "{} role: mock:// endpoint needs a script path",
                    self.role
                )));
            }
        } else {
            reqwest::Url::parse(&self.endpoint_url).map_err(|e| {
                BackendError::Configuration(format!(
                    "{} role: endpoint_url {:?} is not a valid URL: {e}",
                    self.role, self.endpoint_url
                ))
            })?;
        }
        if self.in_flight_cap == 0 {
            return Err(BackendError::Configuration(format!(
                "{} role: in_flight_cap must be >= 1",
                self.role
            )));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s) ({role}): {message}")]
    Transport {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("protocol error ({role}): {excerpt}")]
    Protocol { role: Role, excerpt: String },
    #[error("no scripted response for fingerprint {fingerprint} ({role})")]
    Unscripted { role: Role, fingerprint: String },
    #[error("backend configuration: {0}")]
    Configuration(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Transport failures are the only retryable class.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// Stable identity of a request: role, model, messages, and sampling.
pub fn request_fingerprint(
    role: Role,
    model_name: &str,
    messages: &[ChatMessage],
    sampling: &SamplingParams,
) -> String {
    #[derive(Serialize)]
    struct View<'a> {
        role: Role,
        model_name: &'a str,
        messages: &'a [ChatMessage],
        sampling: &'a SamplingParams,
    }
    let bytes = serde_json::to_vec(&View {
        role,
        model_name,
        messages,
        sampling,
    })
    .expect("fingerprint view serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

/// What a transport hands back for one request.
#[derive(Debug, Clone)]
pub struct ChatOutcome {
    pub completions: Vec<String>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    /// Full response body, when the transport has one (field extraction).
    pub raw: Option<serde_json::Value>,
}

/// A single request/response executor. Implementations do exactly one
/// attempt; the [`Client`] owns the retry loop.
pub trait ChatTransport: Send + Sync {
    fn execute(
        &self,
        cfg: &RoleConfig,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<ChatOutcome, BackendError>;
}

/// One entry in a client's call transcript. Holds hashes and counters only.
#[derive(Debug, Clone, Serialize)]
pub struct CallRecord {
    pub role: Role,
    pub fingerprint: String,
    pub latency_ms: u128,
    pub ok: bool,
    pub completions: usize,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

/// A role-bound client: validation, retries with exponential backoff,
/// transcripts, and score extraction for the reward role.
pub struct Client {
    cfg: RoleConfig,
    transport: Arc<dyn ChatTransport>,
    transcript: Arc<Mutex<Vec<CallRecord>>>,
}

impl Client {
    pub fn new(cfg: RoleConfig, transport: Arc<dyn ChatTransport>) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(Client {
            cfg,
            transport,
            transcript: Arc::new(Mutex::new(Vec::new())),
        })
    }

    pub fn config(&self) -> &RoleConfig {
        &self.cfg
    }

    pub fn role(&self) -> Role {
        self.cfg.role
    }

    /// Request completions with the role's configured sampling.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<Vec<String>, BackendError> {
        self.chat_with(messages, &self.cfg.sampling.clone())
    }

    /// Request completions with explicit sampling (e.g. refilling a partial
    /// candidate batch with a smaller n).
    pub fn chat_with(
        &self,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<Vec<String>, BackendError> {
        sampling.validate()?;
        if messages.is_empty() {
            return Err(BackendError::InvalidRequest("empty message list".into()));
        }
        for m in messages {
            if m.role == MessageRole::User && m.content.is_empty() {
                return Err(BackendError::InvalidRequest(
                    "user message with empty content".into(),
                ));
            }
        }
        let outcome = self.execute_with_retries(messages, sampling)?;
        let n = sampling.n_samples as usize;
        if outcome.completions.len() < n {
            return Err(BackendError::Protocol {
                role: self.cfg.role,
                excerpt: format!(
                    "{} completions returned, {} requested",
                    outcome.completions.len(),
                    n
                ),
            });
        }
        let mut completions = outcome.completions;
        completions.truncate(n);
        Ok(completions)
    }

    /// Score one (problem, solution) pair with the reward role.
    pub fn score(&self, problem: &str, solution: &str) -> Result<f64, BackendError> {
        if self.cfg.role != Role::Reward {
            return Err(BackendError::InvalidRequest(format!(
                "score requires the reward role, this client is {}",
                self.cfg.role
            )));
        }
        let messages = [
            ChatMessage::user(problem.to_string()),
            ChatMessage::assistant(solution.to_string()),
        ];
        let sampling = self.cfg.sampling.clone();
        let outcome = self.execute_with_retries(&messages, &sampling)?;
        let score = self.extract_score(&outcome)?;
        if !score.is_finite() {
            return Err(BackendError::Protocol {
                role: self.cfg.role,
                excerpt: format!("non-finite score {score}"),
            });
        }
        Ok(score)
    }

    fn extract_score(&self, outcome: &ChatOutcome) -> Result<f64, BackendError> {
        let protocol = |excerpt: String| BackendError::Protocol {
            role: self.cfg.role,
            excerpt,
        };
        match &self.cfg.score_extraction {
            ScoreExtraction::CompletionText => {
                let text = outcome
                    .completions
                    .first()
                    .ok_or_else(|| protocol("no completion to read a score from".into()))?;
                text.trim()
                    .parse::<f64>()
                    .map_err(|_| protocol(format!("unparseable score text {:?}", excerpt_of(text))))
            }
            ScoreExtraction::CompletionFirstNumber => {
                let text = outcome
                    .completions
                    .first()
                    .ok_or_else(|| protocol("no completion to read a score from".into()))?;
                let re = regex::Regex::new(r"[-+]?\d+(\.\d+)?([eE][-+]?\d+)?")
                    .expect("static regex");
                let m = re
                    .find(text)
                    .ok_or_else(|| protocol(format!("no number in {:?}", excerpt_of(text))))?;
                m.as_str()
                    .parse::<f64>()
                    .map_err(|_| protocol(format!("unparseable number {:?}", m.as_str())))
            }
            ScoreExtraction::ResponseField { field } => {
                let raw = outcome
                    .raw
                    .as_ref()
                    .ok_or_else(|| protocol("transport carries no raw response body".into()))?;
                let v = raw
                    .get(field)
                    .ok_or_else(|| protocol(format!("response field {field:?} absent")))?;
                match v {
                    serde_json::Value::Number(n) => n
                        .as_f64()
                        .ok_or_else(|| protocol(format!("field {field:?} is not a float"))),
                    serde_json::Value::Array(items) => items
                        .first()
                        .and_then(|x| x.as_f64())
                        .ok_or_else(|| protocol(format!("field {field:?} has no numeric head"))),
                    other => Err(protocol(format!(
                        "field {field:?} has unexpected shape {other}"
                    ))),
                }
            }
        }
    }

    fn execute_with_retries(
        &self,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<ChatOutcome, BackendError> {
        let fingerprint =
            request_fingerprint(self.cfg.role, &self.cfg.model_name, messages, sampling);
        let started = Instant::now();
        let attempts_allowed = self.cfg.max_retries + 1;
        let mut last_message = String::new();
        for attempt in 0..attempts_allowed {
            if attempt > 0 {
                let backoff = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.transport.execute(&self.cfg, messages, sampling) {
                Ok(outcome) => {
                    self.record(&fingerprint, started, true, &outcome);
                    return Ok(outcome);
                }
                Err(e) if e.is_retryable() => {
                    last_message = e.to_string();
                    tracing::debug!(role = %self.cfg.role, attempt, "retryable backend failure: {last_message}");
                }
                Err(e) => {
                    self.record_failure(&fingerprint, started);
                    return Err(e);
                }
            }
        }
        self.record_failure(&fingerprint, started);
        Err(BackendError::Transport {
            role: self.cfg.role,
            attempts: attempts_allowed,
            message: last_message,
        })
    }

    fn record(&self, fingerprint: &str, started: Instant, ok: bool, outcome: &ChatOutcome) {
        self.transcript.lock().expect("transcript lock").push(CallRecord {
            role: self.cfg.role,
            fingerprint: fingerprint.to_string(),
            latency_ms: started.elapsed().as_millis(),
            ok,
            completions: outcome.completions.len(),
            prompt_tokens: outcome.prompt_tokens,
            completion_tokens: outcome.completion_tokens,
        });
    }

    fn record_failure(&self, fingerprint: &str, started: Instant) {
        self.transcript.lock().expect("transcript lock").push(CallRecord {
            role: self.cfg.role,
            fingerprint: fingerprint.to_string(),
            latency_ms: started.elapsed().as_millis(),
            ok: false,
            completions: 0,
            prompt_tokens: None,
            completion_tokens: None,
        });
    }

    /// Copy of the per-call transcript so far.
    pub fn transcript(&self) -> Vec<CallRecord> {
        self.transcript.lock().expect("transcript lock").clone()
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

// ---------------------------------------------------------------------------
// HTTP transport
// ---------------------------------------------------------------------------

/// Talks to a chat-completions endpoint: `POST <endpoint>/chat/completions`.
pub struct HttpTransport {
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            http: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl ChatTransport for HttpTransport {
    fn execute(
        &self,
        cfg: &RoleConfig,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<ChatOutcome, BackendError> {
        let url = format!(
            "{}/chat/completions",
            cfg.endpoint_url.trim_end_matches('/')
        );
        let body = json!({
            "model": cfg.model_name,
            "messages": messages,
            "temperature": sampling.temperature,
            "max_tokens": sampling.max_new_tokens,
            "n": sampling.n_samples,
        });
        let mut req = self
            .http
            .post(&url)
            .timeout(Duration::from_secs(cfg.request_timeout_secs))
            .json(&body);
        if let Some(var) = &cfg.api_key_env {
            let key = std::env::var(var).map_err(|_| {
                BackendError::Configuration(format!(
                    "{} role: api_key_env {var:?} is not set in the environment",
                    cfg.role
                ))
            })?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport {
            role: cfg.role,
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport {
            role: cfg.role,
            attempts: 1,
            message: format!("reading body: {e}"),
        })?;
        if status.is_server_error() {
            return Err(BackendError::Transport {
                role: cfg.role,
                attempts: 1,
                message: format!("server status {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Protocol {
                role: cfg.role,
                excerpt: format!("status {status}: {}", excerpt_of(&text)),
            });
        }
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|_| BackendError::Protocol {
                role: cfg.role,
                excerpt: format!("non-JSON body: {}", excerpt_of(&text)),
            })?;
        let parsed: WireResponse =
            serde_json::from_value(raw.clone()).map_err(|e| BackendError::Protocol {
                role: cfg.role,
                excerpt: format!("unexpected shape ({e}): {}", excerpt_of(&text)),
            })?;
        Ok(ChatOutcome {
            completions: parsed.choices.into_iter().map(|c| c.message.content).collect(),
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
            raw: Some(raw),
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted mock transport (exact request fingerprints)
// ---------------------------------------------------------------------------

enum ScriptEntry {
    Respond(Vec<String>),
    /// Fail `failures` times with a transport error, then respond.
    FailThen {
        failures: u32,
        completions: Option<Vec<String>>,
    },
}

/// Request-exact mock script: fingerprint → canned behavior.
#[derive(Default)]
pub struct MockScript {
    entries: HashMap<String, ScriptEntry>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Script completions for the exact request.
    pub fn respond(
        mut self,
        role: Role,
        model_name: &str,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
        completions: Vec<String>,
    ) -> Self {
        let fp = request_fingerprint(role, model_name, messages, sampling);
        self.entries.insert(fp, ScriptEntry::Respond(completions));
        self
    }

    /// Script `failures` transport errors, then (optionally) completions.
    pub fn fail_then(
        mut self,
        role: Role,
        model_name: &str,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
        failures: u32,
        completions: Option<Vec<String>>,
    ) -> Self {
        let fp = request_fingerprint(role, model_name, messages, sampling);
        self.entries
            .insert(fp, ScriptEntry::FailThen { failures, completions });
        self
    }
}

/// Deterministic transport over a [`MockScript`]; identical requests get
/// byte-identical responses, unscripted requests get a designated error.
pub struct ScriptedTransport {
    entries: HashMap<String, ScriptEntry>,
    hits: Mutex<HashMap<String, u32>>,
}

impl ScriptedTransport {
    /// Number of times a given fingerprint was requested.
    pub fn hits(&self, fingerprint: &str) -> u32 {
        *self
            .hits
            .lock()
            .expect("hits lock")
            .get(fingerprint)
            .unwrap_or(&0)
    }

    /// Total requests seen.
    pub fn total_hits(&self) -> u32 {
        self.hits.lock().expect("hits lock").values().sum()
    }
}

/// Build a transport from a script.
pub fn mock_from_script(script: MockScript) -> Arc<ScriptedTransport> {
    Arc::new(ScriptedTransport {
        entries: script.entries,
        hits: Mutex::new(HashMap::new()),
    })
}

impl ChatTransport for ScriptedTransport {
    fn execute(
        &self,
        cfg: &RoleConfig,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<ChatOutcome, BackendError> {
        let fp = request_fingerprint(cfg.role, &cfg.model_name, messages, sampling);
        let count = {
            let mut hits = self.hits.lock().expect("hits lock");
            let c = hits.entry(fp.clone()).or_insert(0);
            *c += 1;
            *c
        };
        match self.entries.get(&fp) {
            None => Err(BackendError::Unscripted {
                role: cfg.role,
                fingerprint: fp,
            }),
            Some(ScriptEntry::Respond(completions)) => Ok(ChatOutcome {
                completions: completions.clone(),
                prompt_tokens: None,
                completion_tokens: None,
                raw: None,
            }),
            Some(ScriptEntry::FailThen { failures, completions }) => {
                if count <= *failures {
                    Err(BackendError::Transport {
                        role: cfg.role,
                        attempts: 1,
                        message: "scripted transport failure".into(),
                    })
                } else if let Some(completions) = completions {
                    Ok(ChatOutcome {
                        completions: completions.clone(),
                        prompt_tokens: None,
                        completion_tokens: None,
                        raw: None,
                    })
                } else {
                    Err(BackendError::Transport {
                        role: cfg.role,
                        attempts: 1,
                        message: "scripted transport failure".into(),
                    })
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rule-based mock transport (file-backed, for offline CLI runs)
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
pub struct MockRule {
    /// Substrings that must all appear in the concatenated message contents.
    #[serde(default)]
    pub contains: Vec<String>,
    pub responses: Vec<String>,
    /// Repeat responses cyclically to satisfy larger n.
    #[serde(default = "default_true")]
    pub cycle: bool,
}

/// JSON shape of a `mock://` script file.
#[derive(Debug, Clone, Deserialize, Default)]
pub struct RuleMockSpec {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Fallback when no rule matches; absent means unscripted error.
    #[serde(default)]
    pub default: Option<MockRule>,
}

/// First-match rule mock; deterministic by construction.
pub struct RuleMock {
    spec: RuleMockSpec,
    requests: Mutex<u32>,
}

impl RuleMock {
    pub fn new(spec: RuleMockSpec) -> Self {
        RuleMock {
            spec,
            requests: Mutex::new(0),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Configuration(format!("mock script {}: {e}", path.display()))
        })?;
        let spec: RuleMockSpec = serde_json::from_str(&text).map_err(|e| {
            BackendError::Configuration(format!("mock script {}: {e}", path.display()))
        })?;
        Ok(RuleMock::new(spec))
    }

    pub fn requests(&self) -> u32 {
        *self.requests.lock().expect("requests lock")
    }
}

impl ChatTransport for RuleMock {
    fn execute(
        &self,
        cfg: &RoleConfig,
        messages: &[ChatMessage],
        sampling: &SamplingParams,
    ) -> Result<ChatOutcome, BackendError> {
        *self.requests.lock().expect("requests lock") += 1;
        let haystack: String = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let rule = self
            .spec
            .rules
            .iter()
            .find(|r| r.contains.iter().all(|c| haystack.contains(c)))
            .or(self.spec.default.as_ref());
        let Some(rule) = rule else {
            return Err(BackendError::Unscripted {
                role: cfg.role,
                fingerprint: request_fingerprint(
                    cfg.role,
                    &cfg.model_name,
                    messages,
                    sampling,
                ),
            });
        };
        let n = sampling.n_samples as usize;
        if rule.responses.is_empty() {
            return Err(BackendError::Protocol {
                role: cfg.role,
                excerpt: "mock rule with empty responses".into(),
            });
        }
        let completions: Vec<String> = if rule.responses.len() >= n {
            rule.responses[..n].to_vec()
        } else if rule.cycle {
            (0..n)
                .map(|i| rule.responses[i % rule.responses.len()].clone())
                .collect()
        } else {
            return Err(BackendError::Protocol {
                role: cfg.role,
                excerpt: format!(
                    "mock rule has {} responses, {} requested and cycling disabled",
                    rule.responses.len(),
                    n
                ),
            });
        };
        Ok(ChatOutcome {
            completions,
            prompt_tokens: None,
            completion_tokens: None,
            raw: None,
        })
    }
}

/// Build a client for a role config: `mock://<path>` endpoints load a rule
/// script (relative paths resolved against `base_dir`), anything else speaks
/// HTTP.
pub fn build_client(cfg: &RoleConfig, base_dir: &Path) -> Result<Client, BackendError> {
    let transport: Arc<dyn ChatTransport> = if let Some(rest) =
        cfg.endpoint_url.strip_prefix("mock://")
    {
        let path = base_dir.join(rest);
        Arc::new(RuleMock::from_path(&path)?)
    } else {
        Arc::new(HttpTransport::new())
    };
    Client::new(cfg.clone(), transport)
}
