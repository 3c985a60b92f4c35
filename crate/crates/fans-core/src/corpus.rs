//! Dataset ingestion, the canonical run-record model, and append-only JSONL
//! persistence. A run is reconstructable from its log alone: every stage
//! appends records, reloading folds them back into [`RunState`], and
//! [`pending_work`] computes exactly what is left to do — which is what makes
//! interrupted runs resumable.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formalize::{Faithfulness, Translation};
use crate::mathtext::CanonicalAnswer;
use crate::prove::ProofAttempt;
use crate::select::{Policy, SelectionResult};
use crate::verify::Verdict;

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    /// Stable, unique within the dataset.
    pub id: String,
    /// Natural-language statement; LaTeX permitted.
    pub statement: String,
    /// Ground truth in its raw benchmark form; interpretation is deferred to
    /// answer normalization.
    pub gold_answer: String,
    pub subject: Option<String>,
    pub level: Option<String>,
}

/// One sampled candidate solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub problem_id: String,
    pub candidate_index: usize,
    /// Raw sampler completion.
    pub completion: String,
    /// Normalized extracted answer; `None` when no final answer was found.
    pub answer: Option<CanonicalAnswer>,
    /// Why extraction produced no answer, when it failed structurally.
    pub extraction_error: Option<String>,
    /// Reward-model score, present when a reward role is configured.
    pub score: Option<f64>,
}

/// Faithfulness-check outcome for one translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub problem_id: String,
    pub candidate_index: usize,
    pub faithfulness: Faithfulness,
}

/// All proof attempts produced for one candidate in one prover round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRound {
    pub problem_id: String,
    pub candidate_index: usize,
    /// Completions requested from the prover.
    pub requested: u32,
    /// Completions that parsed into well-formed proof sources.
    pub parsed: u32,
    /// Parsed completions discarded as duplicate sources.
    pub deduplicated: u32,
    pub attempts: Vec<ProofAttempt>,
}

/// Verdict for one proof attempt, kept alongside the aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptVerdict {
    pub attempt_index: usize,
    pub verdict: Verdict,
}

/// Per-candidate verification outcome plus the attempt-level detail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub problem_id: String,
    pub candidate_index: usize,
    /// At least one attempt passed and the faithfulness gate admits it.
    pub verified: bool,
    /// Lowest-index passing attempt, independent of the faithfulness gate.
    pub passing_attempt: Option<usize>,
    pub verdicts: Vec<AttemptVerdict>,
}

/// Pipeline stages that persist records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sampled,
    Translated,
    Checked,
    Proved,
    Verified,
    Selected,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Sampled => "sampled",
            Stage::Translated => "translated",
            Stage::Checked => "checked",
            Stage::Proved => "proved",
            Stage::Verified => "verified",
            Stage::Selected => "selected",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stage-specific record payload. The tag mirrors the record's stage field so
/// either is enough to route a line while scanning a log by eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StagePayload {
    Sampled(Candidate),
    Translated(Translation),
    Checked(CheckRecord),
    Proved(ProofRound),
    Verified(VerificationRecord),
    Selected(SelectionResult),
}

impl StagePayload {
    pub fn stage(&self) -> Stage {
        match self {
            StagePayload::Sampled(_) => Stage::Sampled,
            StagePayload::Translated(_) => Stage::Translated,
            StagePayload::Checked(_) => Stage::Checked,
            StagePayload::Proved(_) => Stage::Proved,
            StagePayload::Verified(_) => Stage::Verified,
            StagePayload::Selected(_) => Stage::Selected,
        }
    }
}

/// One append-only log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_id: String,
    pub stage: Stage,
    pub payload: StagePayload,
    pub created_at: DateTime<Utc>,
    pub config_fingerprint: String,
}

impl RunRecord {
    pub fn new(problem_id: &str, payload: StagePayload, config_fingerprint: &str) -> Self {
        RunRecord {
            problem_id: problem_id.to_string(),
            stage: payload.stage(),
            payload,
            created_at: Utc::now(),
            config_fingerprint: config_fingerprint.to_string(),
        }
    }

    /// Identity for idempotent appends: hash of (problem_id, stage, payload),
    /// deliberately excluding `created_at` so a replayed stage re-appending
    /// the same fact is a no-op.
    pub fn identity(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            problem_id: &'a str,
            stage: Stage,
            payload: &'a StagePayload,
        }
        let bytes = serde_json::to_vec(&View {
            problem_id: &self.problem_id,
            stage: self.stage,
            payload: &self.payload,
        })
        .expect("record payloads serialize");
        crate::backends::hex(&sha2::Sha256::digest(&bytes))
    }
}

use sha2::Digest;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("could not access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, record {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}, record {line}: no usable {field} field")]
    MissingField {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("duplicate problem id {id:?} in {path}")]
    DuplicateId { id: String, path: String },
    #[error(
        "configuration drift: log {path} was written with fingerprint {found} but this run has {expected}"
    )]
    Drift {
        path: String,
        expected: String,
        found: String,
    },
}

/// Dataset file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    JsonArray,
}

/// Field-name mapping: the benchmarks disagree on schema (problem vs
/// question, answer vs solution), so each logical field lists the record keys
/// to try, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldMap {
    pub id: Vec<String>,
    pub statement: Vec<String>,
    pub answer: Vec<String>,
    pub subject: Vec<String>,
    pub level: Vec<String>,
}

impl Default for FieldMap {
    fn default() -> Self {
        let list = |names: &[&str]| names.iter().map(|s| s.to_string()).collect();
        FieldMap {
            id: list(&["id", "problem_id", "unique_id"]),
            statement: list(&["problem", "question", "statement"]),
            answer: list(&["answer", "solution", "gold_answer"]),
            subject: list(&["subject", "type", "category"]),
            level: list(&["level", "difficulty"]),
        }
    }
}

fn field_as_string(record: &serde_json::Value, names: &[String]) -> Option<String> {
    for name in names {
        match record.get(name) {
            None | Some(serde_json::Value::Null) => continue,
            Some(serde_json::Value::String(s)) => return Some(s.clone()),
            Some(other) => return Some(other.to_string()),
        }
    }
    None
}

/// Load a dataset file into problems, in file order. Ids are synthesized as
/// `<dataset_name>-<index>` (0-based) when the records carry none.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    map: &FieldMap,
    dataset_name: &str,
) -> Result<Vec<Problem>, CorpusError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: shown.clone(),
        source,
    })?;
    let records: Vec<(usize, serde_json::Value)> = match format {
        DatasetFormat::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                    path: shown.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                out.push((i + 1, value));
            }
            out
        }
        DatasetFormat::JsonArray => {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                    path: shown.clone(),
                    line: 1,
                    message: e.to_string(),
                })?;
            let serde_json::Value::Array(items) = value else {
                return Err(CorpusError::Parse {
                    path: shown,
                    line: 1,
                    message: "expected a top-level JSON array".into(),
                });
            };
            items.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
        }
    };

    let mut problems = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    for (index, (line, record)) in records.into_iter().enumerate() {
        if !record.is_object() {
            return Err(CorpusError::Parse {
                path: shown,
                line,
                message: "expected a JSON object".into(),
            });
        }
        let statement =
            field_as_string(&record, &map.statement).ok_or(CorpusError::MissingField {
                path: shown.clone(),
                line,
                field: "statement",
            })?;
        if statement.trim().is_empty() {
            return Err(CorpusError::MissingField {
                path: shown,
                line,
                field: "statement",
            });
        }
        let gold_answer =
            field_as_string(&record, &map.answer).ok_or(CorpusError::MissingField {
                path: shown.clone(),
                line,
                field: "answer",
            })?;
        let id = field_as_string(&record, &map.id)
            .unwrap_or_else(|| format!("{dataset_name}-{index}"));
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { id, path: shown });
        }
        problems.push(Problem {
            id,
            statement,
            gold_answer,
            subject: field_as_string(&record, &map.subject),
            level: field_as_string(&record, &map.level),
        });
    }
    Ok(problems)
}

/// Everything a run has established so far, folded from the log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunState {
    pub records: Vec<RunRecord>,
    pub candidates: BTreeMap<(String, usize), Candidate>,
    pub translations: BTreeMap<(String, usize), Translation>,
    pub checks: BTreeMap<(String, usize), Faithfulness>,
    pub proofs: BTreeMap<(String, usize), ProofRound>,
    pub verifications: BTreeMap<(String, usize), VerificationRecord>,
    pub selections: BTreeMap<(String, Policy), SelectionResult>,
}

impl RunState {
    /// Fold one record into the indexes. Payload-identical duplicates are
    /// harmless (last write wins over an equal value).
    pub fn apply(&mut self, record: RunRecord) {
        let pid = record.problem_id.clone();
        match &record.payload {
            StagePayload::Sampled(c) => {
                self.candidates.insert((pid, c.candidate_index), c.clone());
            }
            StagePayload::Translated(t) => {
                self.translations.insert((pid, t.candidate_index), t.clone());
            }
            StagePayload::Checked(c) => {
                self.checks.insert((pid, c.candidate_index), c.faithfulness);
            }
            StagePayload::Proved(p) => {
                self.proofs.insert((pid, p.candidate_index), p.clone());
            }
            StagePayload::Verified(v) => {
                self.verifications.insert((pid, v.candidate_index), v.clone());
            }
            StagePayload::Selected(s) => {
                self.selections.insert((pid, s.policy), s.clone());
            }
        }
        self.records.push(record);
    }

    /// Faithfulness for one candidate: the check record when one exists,
    /// otherwise whatever the translation itself carries.
    pub fn faithfulness_of(&self, key: &(String, usize)) -> Option<Faithfulness> {
        self.checks
            .get(key)
            .copied()
            .or_else(|| self.translations.get(key).map(|t| t.faithfulness))
    }

    /// Reload a state from a log file. The trailing line is tolerated when
    /// torn (interrupted final write); interior malformed lines are errors.
    pub fn load(path: &Path) -> Result<RunState, CorpusError> {
        let mut state = RunState::default();
        for record in read_log(path)?.records {
            state.apply(record);
        }
        Ok(state)
    }
}

struct LogContents {
    records: Vec<RunRecord>,
    /// Byte length of the parseable prefix when the file ends in a torn
    /// line; a writer must cut the file back to this before appending, or
    /// the next append would fuse with the fragment into interior garbage.
    clean_len: Option<u64>,
}

fn read_log(path: &Path) -> Result<LogContents, CorpusError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: shown.clone(),
        source,
    })?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    let mut clean_len = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(record) => {
                if record.payload.stage() != record.stage {
                    return Err(CorpusError::Parse {
                        path: shown,
                        line: i + 1,
                        message: format!(
                            "stage field says {} but payload is {}",
                            record.stage,
                            record.payload.stage()
                        ),
                    });
                }
                records.push(record);
            }
            Err(e) => {
                let last = i + 1 == lines.len();
                if last && !complete {
                    tracing::warn!(
                        "ignoring torn trailing line {} of {shown} (interrupted write)",
                        i + 1
                    );
                    clean_len = Some(text.rfind('\n').map(|i| i + 1).unwrap_or(0) as u64);
                    break;
                }
                return Err(CorpusError::Parse {
                    path: shown,
                    line: i + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(LogContents { records, clean_len })
}

/// Append-only writer over a run log. There must be exactly one per run
/// (single writer, many readers); appends are durable before return.
#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    file: File,
    seen: HashSet<String>,
    fingerprint: String,
}

impl RunLog {
    /// Open (or create) the log at `path` for a run with the given config
    /// fingerprint. Existing records are replayed to seed idempotence and to
    /// detect configuration drift.
    pub fn open(path: &Path, fingerprint: &str) -> Result<(RunLog, RunState), CorpusError> {
        let mut state = RunState::default();
        let mut seen = HashSet::new();
        if path.exists() {
            let contents = read_log(path)?;
            for record in contents.records {
                if record.config_fingerprint != fingerprint {
                    return Err(CorpusError::Drift {
                        path: path.display().to_string(),
                        expected: fingerprint.to_string(),
                        found: record.config_fingerprint,
                    });
                }
                seen.insert(record.identity());
                state.apply(record);
            }
            // Cut a torn tail off before taking the append handle, so the
            // rewritten record starts on its own line instead of fusing with
            // the fragment.
            if let Some(clean_len) = contents.clean_len {
                let file = std::fs::OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|source| CorpusError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                file.set_len(clean_len).map_err(|source| CorpusError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                file.sync_data().map_err(|source| CorpusError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok((
            RunLog {
                path: path.to_path_buf(),
                file,
                seen,
                fingerprint: fingerprint.to_string(),
            },
            state,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably append one record. Returns false (and writes nothing) when a
    /// payload-identical record is already present.
    pub fn append(&mut self, record: &RunRecord) -> Result<bool, CorpusError> {
        if record.config_fingerprint != self.fingerprint {
            return Err(CorpusError::Drift {
                path: self.path.display().to_string(),
                expected: self.fingerprint.clone(),
                found: record.config_fingerprint.clone(),
            });
        }
        let identity = record.identity();
        if self.seen.contains(&identity) {
            return Ok(false);
        }
        let io = |source| CorpusError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let line = serde_json::to_string(record).expect("records serialize");
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.write_all(b"\n").map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.seen.insert(identity);
        Ok(true)
    }
}

/// What a stage runner needs to know to compute pending work.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub n_samples: usize,
    /// Whether a faithfulness-check stage is configured at all.
    pub checker_enabled: bool,
    pub policies: Vec<Policy>,
}

/// One unit of stage work, safe to hand to a worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkItem {
    /// Sample the missing candidate indices for one problem.
    Sample {
        problem_id: String,
        missing: Vec<usize>,
    },
    Translate {
        problem_id: String,
        candidate_index: usize,
    },
    Check {
        problem_id: String,
        candidate_index: usize,
    },
    Prove {
        problem_id: String,
        candidate_index: usize,
    },
    Verify {
        problem_id: String,
        candidate_index: usize,
    },
    Select {
        problem_id: String,
        policy: Policy,
    },
}

fn sorted_ids(problems: &[Problem]) -> Vec<&Problem> {
    let mut sorted: Vec<&Problem> = problems.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted
}

/// Compute exactly the work items that have a completed predecessor but no
/// record at `stage`, in deterministic (problem id, candidate index) order.
pub fn pending_work(
    state: &RunState,
    stage: Stage,
    problems: &[Problem],
    params: &StageParams,
) -> Vec<WorkItem> {
    match stage {
        Stage::Sampled => sorted_ids(problems)
            .into_iter()
            .filter_map(|p| {
                let missing: Vec<usize> = (0..params.n_samples)
                    .filter(|i| !state.candidates.contains_key(&(p.id.clone(), *i)))
                    .collect();
                if missing.is_empty() {
                    None
                } else {
                    Some(WorkItem::Sample {
                        problem_id: p.id.clone(),
                        missing,
                    })
                }
            })
            .collect(),
        Stage::Translated => state
            .candidates
            .iter()
            .filter(|(_, c)| c.answer.is_some())
            .filter(|(key, _)| !state.translations.contains_key(key))
            .map(|((pid, idx), _)| WorkItem::Translate {
                problem_id: pid.clone(),
                candidate_index: *idx,
            })
            .collect(),
        Stage::Checked => {
            if !params.checker_enabled {
                return Vec::new();
            }
            state
                .translations
                .iter()
                .filter(|(_, t)| t.ok())
                .filter(|(key, _)| !state.checks.contains_key(key))
                .map(|((pid, idx), _)| WorkItem::Check {
                    problem_id: pid.clone(),
                    candidate_index: *idx,
                })
                .collect()
        }
        Stage::Proved => state
            .translations
            .iter()
            .filter(|(_, t)| t.ok())
            .filter(|(key, _)| !state.proofs.contains_key(key))
            .map(|((pid, idx), _)| WorkItem::Prove {
                problem_id: pid.clone(),
                candidate_index: *idx,
            })
            .collect(),
        Stage::Verified => state
            .proofs
            .keys()
            .filter(|key| !state.verifications.contains_key(key))
            .map(|(pid, idx)| WorkItem::Verify {
                problem_id: pid.clone(),
                candidate_index: *idx,
            })
            .collect(),
        Stage::Selected => {
            let blocked = blocked_problems(state, problems, params);
            let mut items = Vec::new();
            for p in sorted_ids(problems) {
                if blocked.contains(p.id.as_str()) {
                    continue;
                }
                for policy in &params.policies {
                    if !state
                        .selections
                        .contains_key(&(p.id.clone(), *policy))
                    {
                        items.push(WorkItem::Select {
                            problem_id: p.id.clone(),
                            policy: *policy,
                        });
                    }
                }
            }
            items
        }
    }
}

/// Problems with unfinished upstream work (selection must not run on them
/// yet, or resumed runs would disagree with uninterrupted ones).
fn blocked_problems<'a>(
    state: &RunState,
    problems: &'a [Problem],
    params: &StageParams,
) -> BTreeSet<&'a str> {
    let mut blocked = BTreeSet::new();
    for p in problems {
        let sampled = (0..params.n_samples)
            .all(|i| state.candidates.contains_key(&(p.id.clone(), i)));
        if !sampled {
            blocked.insert(p.id.as_str());
        }
    }
    for stage in [Stage::Translated, Stage::Checked, Stage::Proved, Stage::Verified] {
        for item in pending_work(state, stage, problems, params) {
            let pid = match &item {
                WorkItem::Translate { problem_id, .. }
                | WorkItem::Check { problem_id, .. }
                | WorkItem::Prove { problem_id, .. }
                | WorkItem::Verify { problem_id, .. } => problem_id,
                _ => continue,
            };
            if let Some(p) = problems.iter().find(|p| &p.id == pid) {
                blocked.insert(p.id.as_str());
            }
        }
    }
    blocked
}
