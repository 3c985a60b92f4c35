//! Run configuration: a TOML file overlaid by `FANS_*` environment variables
//! and `--set key=value` flags (in that precedence), validated, and hashed
//! into a semantic fingerprint that every run record must match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;
use thiserror::Error;

use crate::backends::{Role, RoleConfig, SamplingParams, ScoreExtraction};
use crate::corpus::{DatasetFormat, FieldMap};
use crate::formalize::{CheckerMode, TranslationMode};
use crate::select::Policy;
use crate::verify::VerifierConfig;

/// Environment variables under this prefix override config fields: the rest
/// of the name is lowercased and `__` separates nesting, so
/// `FANS_ROLES__SAMPLER__MODEL_NAME` sets `roles.sampler.model_name`.
pub const ENV_PREFIX: &str = "FANS_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("could not parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid override {entry:?}: {message}")]
    Override { entry: String, message: String },
    #[error("config field {field}: {message}")]
    Invalid { field: String, message: String },
}

/// Where the dataset lives and how its records map onto problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: String,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Used for synthesized problem ids (`<name>-<index>`); defaults to the
    /// file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub fields: FieldMap,
}

impl DatasetConfig {
    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    }
}

/// Translation-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationSettings {
    pub mode: TranslationMode,
    /// Rewrite the NL statement into the proof-problem format via the
    /// aligner before translating.
    pub align: bool,
}

impl Default for TranslationSettings {
    fn default() -> Self {
        TranslationSettings {
            mode: TranslationMode::FewShot,
            align: false,
        }
    }
}

/// One endpoint/model binding; omitted knobs take the per-role defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSpec {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key — never the key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_new_tokens: Option<u32>,
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub request_timeout_secs: Option<u64>,
    #[serde(default)]
    pub retry_backoff_ms: Option<u64>,
    #[serde(default)]
    pub in_flight_cap: Option<usize>,
    #[serde(default)]
    pub score_extraction: Option<ScoreExtraction>,
}

impl RoleSpec {
    fn materialize(&self, role: Role, n_samples: u32, k_proof_attempts: u32) -> RoleConfig {
        let mut sampling = SamplingParams::default_for(role, n_samples, k_proof_attempts);
        if let Some(t) = self.temperature {
            sampling.temperature = t;
        }
        if let Some(m) = self.max_new_tokens {
            sampling.max_new_tokens = m;
        }
        RoleConfig {
            role,
            endpoint_url: self.endpoint_url.clone(),
            model_name: self.model_name.clone(),
            api_key_env: self.api_key_env.clone(),
            sampling,
            max_retries: self.max_retries.unwrap_or(2),
            request_timeout_secs: self.request_timeout_secs.unwrap_or(60),
            retry_backoff_ms: self.retry_backoff_ms.unwrap_or(250),
            in_flight_cap: self.in_flight_cap.unwrap_or(8),
            score_extraction: self.score_extraction.clone().unwrap_or_default(),
        }
    }
}

/// The five pipeline roles. Judge and reward are optional; which runs need
/// them is decided by `checker` and `policies`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesConfig {
    pub sampler: RoleSpec,
    pub translator: RoleSpec,
    #[serde(default)]
    pub judge: Option<RoleSpec>,
    pub prover: RoleSpec,
    #[serde(default)]
    pub reward: Option<RoleSpec>,
}

/// Run-directory and parallelism settings. Deliberately excluded from the
/// config fingerprint: the same run in a different output root is the same
/// run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory holding one subdirectory per run id.
    pub root: String,
    /// Worker-pool width per stage (further capped by each role's
    /// in-flight cap).
    pub workers: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            root: "runs".to_string(),
            workers: 4,
        }
    }
}

fn default_n_samples() -> u32 {
    8
}
fn default_k_proof_attempts() -> u32 {
    4
}
fn default_threshold_min_votes() -> usize {
    2
}
fn default_policies() -> Vec<Policy> {
    vec![Policy::Mv, Policy::Fans]
}

/// Everything a run needs, as loaded from TOML + overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Seed for any randomized ordering (mock determinism).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_samples")]
    pub n_samples: u32,
    #[serde(default = "default_k_proof_attempts")]
    pub k_proof_attempts: u32,
    /// Minimum votes the verified-vote winner needs before the fallback to
    /// plain majority vote kicks in.
    #[serde(default = "default_threshold_min_votes")]
    pub threshold_min_votes: usize,
    #[serde(default)]
    pub checker: CheckerMode,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub translation: TranslationSettings,
    pub verification: VerifierConfig,
    pub roles: RolesConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Load from a TOML file, overlaying `FANS_*` environment variables and
    /// then `--set key=value` overrides (file < env < flags).
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let env: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        Self::load_with_env(path, overrides, &env)
    }

    /// Same as [`RunConfig::load`] with an explicit environment (testable).
    pub fn load_with_env(
        path: &Path,
        overrides: &[String],
        env: &[(String, String)],
    ) -> Result<RunConfig, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            ConfigError::Parse {
                path: shown.clone(),
                message: e.to_string(),
            }
        })?;
        for (name, value) in env {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let segments: Vec<String> = rest
                .to_ascii_lowercase()
                .split("__")
                .map(|s| s.to_string())
                .collect();
            if segments.iter().any(|s| s.is_empty()) {
                return Err(ConfigError::Override {
                    entry: name.clone(),
                    message: "environment override has an empty key segment".into(),
                });
            }
            set_path(&mut table, name, &segments, parse_override_value(value))?;
        }
        for entry in overrides {
            let Some((key, raw)) = entry.split_once('=') else {
                return Err(ConfigError::Override {
                    entry: entry.clone(),
                    message: "expected key=value".into(),
                });
            };
            let segments: Vec<String> = key.trim().split('.').map(|s| s.to_string()).collect();
            if segments.iter().any(|s| s.is_empty()) {
                return Err(ConfigError::Override {
                    entry: entry.clone(),
                    message: "expected a dotted key path".into(),
                });
            }
            set_path(&mut table, entry, &segments, parse_override_value(raw))?;
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
            ConfigError::Parse {
                path: shown,
                message: e.to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, message: String| ConfigError::Invalid {
            field: field.to_string(),
            message,
        };
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(invalid(
                "run_id",
                format!(
                    "{:?} must be nonempty and use only [A-Za-z0-9._-] (it names the run directory)",
                    self.run_id
                ),
            ));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be >= 1".into()));
        }
        if self.k_proof_attempts == 0 {
            return Err(invalid("k_proof_attempts", "must be >= 1".into()));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies", "at least one policy is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.policies {
            if !seen.insert(*p) {
                return Err(invalid("policies", format!("duplicate policy {p}")));
            }
        }
        let needs_reward = self
            .policies
            .iter()
            .any(|p| matches!(p, Policy::Orm | Policy::OrmFans));
        if needs_reward && self.roles.reward.is_none() {
            return Err(invalid(
                "policies",
                "orm/orm_fans need a [roles.reward] section".into(),
            ));
        }
        if self.checker == CheckerMode::External && self.roles.judge.is_none() {
            return Err(invalid(
                "checker",
                "external checking needs a [roles.judge] section".into(),
            ));
        }
        if self.dataset.path.is_empty() {
            return Err(invalid("dataset.path", "must be nonempty".into()));
        }
        if self.output.workers == 0 {
            return Err(invalid("output.workers", "must be >= 1".into()));
        }
        self.verification
            .validate()
            .map_err(|e| invalid("verification", e.to_string()))?;
        for role in [Role::Sampler, Role::Translator, Role::Prover] {
            self.role_config(role)?
                .validate()
                .map_err(|e| invalid(&format!("roles.{role}"), e.to_string()))?;
        }
        if self.roles.judge.is_some() {
            self.role_config(Role::Judge)?
                .validate()
                .map_err(|e| invalid("roles.judge", e.to_string()))?;
        }
        if self.roles.reward.is_some() {
            self.role_config(Role::Reward)?
                .validate()
                .map_err(|e| invalid("roles.reward", e.to_string()))?;
        }
        Ok(())
    }

    /// The fully materialized backend config for one role. The judge role
    /// falls back to the translator's endpoint under self-checking.
    pub fn role_config(&self, role: Role) -> Result<RoleConfig, ConfigError> {
        let spec = match role {
            Role::Sampler => &self.roles.sampler,
            Role::Translator => &self.roles.translator,
            Role::Prover => &self.roles.prover,
            Role::Judge => match (&self.roles.judge, self.checker) {
                (Some(spec), _) => spec,
                (None, CheckerMode::SelfCheck) => &self.roles.translator,
                (None, _) => {
                    return Err(ConfigError::Invalid {
                        field: "roles.judge".into(),
                        message: "no judge configured and checker is not self".into(),
                    })
                }
            },
            Role::Reward => self.roles.reward.as_ref().ok_or(ConfigError::Invalid {
                field: "roles.reward".into(),
                message: "no reward role configured".into(),
            })?,
        };
        let mut cfg = spec.materialize(role, self.n_samples, self.k_proof_attempts);
        // A self-check judge reuses the translator endpoint but must not
        // inherit translator sampling overrides' semantics for n.
        if role == Role::Judge {
            cfg.sampling.n_samples = 1;
        }
        Ok(cfg)
    }

    /// Directory this run writes into: `<output.root>/<run_id>/`.
    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.output.root).join(&self.run_id)
    }

    /// SHA-256 over the semantic fields (everything except `[output]`),
    /// hex-encoded. Stable across reserialization because field order is
    /// fixed and maps are sorted.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            run_id: &'a str,
            seed: u64,
            n_samples: u32,
            k_proof_attempts: u32,
            threshold_min_votes: usize,
            checker: CheckerMode,
            policies: &'a [Policy],
            dataset: &'a DatasetConfig,
            translation: &'a TranslationSettings,
            verification: &'a VerifierConfig,
            roles: &'a RolesConfig,
        }
        let bytes = serde_json::to_vec(&View {
            run_id: &self.run_id,
            seed: self.seed,
            n_samples: self.n_samples,
            k_proof_attempts: self.k_proof_attempts,
            threshold_min_votes: self.threshold_min_votes,
            checker: self.checker,
            policies: &self.policies,
            dataset: &self.dataset,
            translation: &self.translation,
            verification: &self.verification,
            roles: &self.roles,
        })
        .expect("config serializes");
        crate::backends::hex(&sha2::Sha256::digest(&bytes))
    }
}

/// Parse an override value as TOML when possible (numbers, booleans,
/// arrays, quoted strings); otherwise keep it as a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let attempt: Result<toml::Table, _> = format!("v = {raw}").parse();
    match attempt {
        Ok(mut table) => table.remove("v").expect("v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(
    table: &mut toml::Table,
    entry: &str,
    segments: &[String],
    value: toml::Value,
) -> Result<(), ConfigError> {
    let mut current = table;
    for segment in &segments[..segments.len() - 1] {
        let slot = current
            .entry(segment.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match slot.as_table_mut() {
            Some(t) => current = t,
            None => {
                return Err(ConfigError::Override {
                    entry: entry.to_string(),
                    message: format!("{segment} is not a table"),
                })
            }
        }
    }
    current.insert(segments[segments.len() - 1].clone(), value);
    Ok(())
}

/// Materialized role configs for a run, in stage order (handy for logging
/// and for writing the resolved config into the run directory).
pub fn resolved_roles(config: &RunConfig) -> BTreeMap<String, RoleConfig> {
    let mut out = BTreeMap::new();
    for role in [Role::Sampler, Role::Translator, Role::Prover] {
        if let Ok(cfg) = config.role_config(role) {
            out.insert(role.to_string(), cfg);
        }
    }
    if config.checker != CheckerMode::Off {
        if let Ok(cfg) = config.role_config(Role::Judge) {
            out.insert(Role::Judge.to_string(), cfg);
        }
    }
    if config.roles.reward.is_some() {
        if let Ok(cfg) = config.role_config(Role::Reward) {
            out.insert(Role::Reward.to_string(), cfg);
        }
    }
    out
}
