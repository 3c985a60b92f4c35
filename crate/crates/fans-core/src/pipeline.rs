//! Stage orchestration: drives a whole run over the append-only log.
//!
//! A run advances through seven stages — sample, translate, check (optional),
//! prove, verify, select, report — each of which derives its remaining work
//! from the folded log state, executes it on a bounded worker pool, and
//! appends one record per completed item. Because work derivation is pure and
//! appends are idempotent, a killed run resumes exactly where it stopped and
//! a completed run re-invoked is a no-op.
//!
//! Failure handling is per item: transient transport failures leave the item
//! pending (the run ends *partial* and a rerun retries it), malformed service
//! replies also leave it pending but mark the run as a *protocol* failure so
//! the exit status distinguishes "try again later" from "fix the service".
//! Configuration problems abort immediately.
//!
//! All relative paths in a config — dataset, `mock://` scripts, the output
//! root — resolve against the directory the config file came from, so a run
//! directory is reproducible no matter where the process starts.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::backends::{build_client, BackendError, Client, Role};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    load_dataset, pending_work, AttemptVerdict, Candidate, CheckRecord, CorpusError, Problem,
    ProofRound, RunLog, RunRecord, RunState, Stage, StageParams, StagePayload,
    VerificationRecord, WorkItem,
};
use crate::evalkit::{build_report, emit_report, gold_map, ReportFormat};
use crate::formalize::{
    check_faithfulness, parse_alignment, render_align_prompt, render_sample_prompt, translate,
    translate_statement, CheckerMode, Translation, TranslationRequest,
};
use crate::mathtext::{extract_answer, normalize};
use crate::prove::prove;
use crate::select::{
    fans_remove, fans_select, majority_vote, orm_fans_select, orm_select, Policy, SelectionInput,
    Threshold,
};
use crate::verify::{aggregate, Verdict, Verifier, VerifyError};

/// Cap on distinct failure messages kept per stage for diagnostics.
const MAX_FAILURE_MESSAGES: usize = 8;

/// The invocable stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Sample,
    Translate,
    Check,
    Prove,
    Verify,
    Select,
    Report,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Sample,
        StageName::Translate,
        StageName::Check,
        StageName::Prove,
        StageName::Verify,
        StageName::Select,
        StageName::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Sample => "sample",
            StageName::Translate => "translate",
            StageName::Check => "check",
            StageName::Prove => "prove",
            StageName::Verify => "verify",
            StageName::Select => "select",
            StageName::Report => "report",
        }
    }

    /// The record stage this pipeline stage writes; `report` writes files,
    /// not records.
    fn record_stage(self) -> Option<Stage> {
        match self {
            StageName::Sample => Some(Stage::Sampled),
            StageName::Translate => Some(Stage::Translated),
            StageName::Check => Some(Stage::Checked),
            StageName::Prove => Some(Stage::Proved),
            StageName::Verify => Some(Stage::Verified),
            StageName::Select => Some(Stage::Selected),
            StageName::Report => None,
        }
    }

    /// The record stage that must have *started* before this stage may be
    /// invoked explicitly. The check stage sits beside prove (both consume
    /// translations), so it never appears here.
    fn chain_predecessor(self) -> Option<Stage> {
        match self {
            StageName::Sample => None,
            StageName::Translate => Some(Stage::Sampled),
            StageName::Check | StageName::Prove => Some(Stage::Translated),
            StageName::Verify => Some(Stage::Proved),
            StageName::Select => Some(Stage::Verified),
            StageName::Report => Some(Stage::Selected),
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StageName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageName::ALL
            .iter()
            .copied()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown stage {s:?}; expected one of sample, translate, check, prove, \
                     verify, select, report"
                )
            })
    }
}

/// The record stage whose work must flow into `stage` before it can start.
fn stage_chain_predecessor(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Sampled => None,
        Stage::Translated => Some(Stage::Sampled),
        Stage::Checked => Some(Stage::Translated),
        Stage::Proved => Some(Stage::Translated),
        Stage::Verified => Some(Stage::Proved),
        Stage::Selected => Some(Stage::Verified),
    }
}

/// The pipeline stage that produces records for a record stage.
fn producing_stage(stage: Stage) -> StageName {
    match stage {
        Stage::Sampled => StageName::Sample,
        Stage::Translated => StageName::Translate,
        Stage::Checked => StageName::Check,
        Stage::Proved => StageName::Prove,
        Stage::Verified => StageName::Verify,
        Stage::Selected => StageName::Select,
    }
}

/// How a run (or a single stage) ended, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Every pending item produced a record.
    Complete,
    /// Some items failed transiently and stay pending; rerunning retries them.
    Partial,
    /// Some items got malformed or unscripted replies; they stay pending but
    /// rerunning will not help until the service (or mock script) is fixed.
    Protocol,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Complete => 0,
            RunStatus::Partial => 2,
            RunStatus::Protocol => 4,
        }
    }
}

/// Errors that abort a run instead of degrading it.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad or inconsistent configuration, dataset, or invocation order.
    #[error("configuration: {0}")]
    Config(String),
    /// The run directory or log could not be read or written.
    #[error("persistence: {0}")]
    Persistence(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        3
    }
}

fn config_error(e: ConfigError) -> PipelineError {
    PipelineError::Config(e.to_string())
}

/// Log errors: fingerprint drift is a configuration problem (the operator
/// changed semantic settings mid-run), anything else is storage trouble.
fn log_error(e: CorpusError) -> PipelineError {
    match e {
        CorpusError::Drift { .. } => PipelineError::Config(e.to_string()),
        other => PipelineError::Persistence(other.to_string()),
    }
}

/// What one stage invocation did.
#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub stage: StageName,
    /// Items that needed doing when the stage started.
    pub pending: usize,
    /// Items that produced records (or report files) this invocation.
    pub completed: usize,
    /// Items left pending on transient failures.
    pub retryable_failures: usize,
    /// Items left pending on malformed replies.
    pub protocol_failures: usize,
    /// Distinct failure messages, capped for readability.
    pub failures: Vec<String>,
    /// Files written (report stage only).
    pub files: Vec<PathBuf>,
}

impl StageOutcome {
    fn idle(stage: StageName) -> Self {
        StageOutcome {
            stage,
            pending: 0,
            completed: 0,
            retryable_failures: 0,
            protocol_failures: 0,
            failures: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn status(&self) -> RunStatus {
        if self.protocol_failures > 0 {
            RunStatus::Protocol
        } else if self.retryable_failures > 0 {
            RunStatus::Partial
        } else {
            RunStatus::Complete
        }
    }
}

/// What a full `run` invocation did: the stages it reached and the overall
/// status (the worst stage status; the run stops at the first non-complete
/// stage so later stages never see partial upstream data).
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub stages: Vec<StageOutcome>,
    pub status: RunStatus,
}

impl RunOutcome {
    /// Report files written, when the run got that far.
    pub fn report_files(&self) -> &[PathBuf] {
        self.stages
            .last()
            .filter(|s| s.stage == StageName::Report)
            .map(|s| s.files.as_slice())
            .unwrap_or(&[])
    }
}

/// One item-level failure inside a stage.
struct ItemFailure {
    protocol: bool,
    message: String,
}

impl From<BackendError> for ItemFailure {
    fn from(e: BackendError) -> Self {
        let protocol = matches!(
            e,
            BackendError::Protocol { .. }
                | BackendError::Unscripted { .. }
                | BackendError::InvalidRequest(_)
        );
        ItemFailure {
            protocol,
            message: e.to_string(),
        }
    }
}

impl From<VerifyError> for ItemFailure {
    fn from(e: VerifyError) -> Self {
        let protocol = !matches!(e, VerifyError::Transport { .. });
        ItemFailure {
            protocol,
            message: e.to_string(),
        }
    }
}

#[derive(Default)]
struct Tally {
    completed: usize,
    retryable: usize,
    protocol: usize,
    messages: Vec<String>,
}

impl Tally {
    fn record_failure(&mut self, failure: ItemFailure) {
        if failure.protocol {
            self.protocol += 1;
        } else {
            self.retryable += 1;
        }
        if self.messages.len() < MAX_FAILURE_MESSAGES && !self.messages.contains(&failure.message)
        {
            self.messages.push(failure.message);
        }
    }
}

/// A self-contained unit of stage work: everything a worker needs, owned, so
/// workers never borrow run state.
enum StageTask {
    Sample {
        problem_id: String,
        statement: String,
        missing: Vec<usize>,
    },
    Translate {
        problem_id: String,
        candidate_index: usize,
        question: String,
        answer: String,
    },
    Check {
        problem_id: String,
        candidate_index: usize,
        question: String,
        answer: String,
        statement: String,
    },
    Prove {
        translation: Translation,
    },
    Verify {
        /// Clone with the effective (check-overridden) faithfulness patched
        /// in, so verification eligibility reflects the judge's verdict.
        translation: Translation,
        round: ProofRound,
    },
}

/// Read-only context shared by stage workers.
#[derive(Clone, Copy)]
struct StageCtx<'a> {
    config: &'a RunConfig,
    verifier: &'a Verifier,
    clients: &'a BTreeMap<Role, Client>,
}

impl StageCtx<'_> {
    fn client(&self, role: Role) -> &Client {
        self.clients
            .get(&role)
            .unwrap_or_else(|| panic!("no client built for role {role}"))
    }

    fn execute(&self, task: &StageTask) -> Result<Vec<(String, StagePayload)>, ItemFailure> {
        match task {
            StageTask::Sample {
                problem_id,
                statement,
                missing,
            } => {
                let sampler = self.client(Role::Sampler);
                let prompt = render_sample_prompt(statement);
                let mut sampling = sampler.config().sampling.clone();
                sampling.n_samples = missing.len() as u32;
                let completions = sampler
                    .chat_with(&prompt, &sampling)
                    .map_err(ItemFailure::from)?;
                let reward = self.clients.get(&Role::Reward);
                let mut records = Vec::with_capacity(missing.len());
                for (slot, completion) in missing.iter().zip(completions) {
                    let (answer, extraction_error) = match extract_answer(&completion) {
                        Ok(found) if found.is_present() => (Some(normalize(&found.raw)), None),
                        Ok(_) => (None, Some("no final answer in completion".into())),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    let score = match reward {
                        Some(client) => Some(
                            client
                                .score(statement, &completion)
                                .map_err(ItemFailure::from)?,
                        ),
                        None => None,
                    };
                    records.push((
                        problem_id.clone(),
                        StagePayload::Sampled(Candidate {
                            problem_id: problem_id.clone(),
                            candidate_index: *slot,
                            completion,
                            answer,
                            extraction_error,
                            score,
                        }),
                    ));
                }
                Ok(records)
            }
            StageTask::Translate {
                problem_id,
                candidate_index,
                question,
                answer,
            } => {
                let translator = self.client(Role::Translator);
                let mode = self.config.translation.mode;
                let req = TranslationRequest {
                    problem_id: problem_id.as_str(),
                    candidate_index: *candidate_index,
                    question: question.as_str(),
                    answer: answer.as_str(),
                };
                // The check stage owns faithfulness, so translation never
                // carries a judge here.
                let translation = if self.config.translation.align {
                    match translator.chat(&render_align_prompt(question, answer)) {
                        Ok(completions) => {
                            let first = completions.into_iter().next().unwrap_or_default();
                            match parse_alignment(&first) {
                                Ok(aligned) => {
                                    translate_statement(translator, &req, &aligned, mode, None)
                                        .map_err(ItemFailure::from)?
                                }
                                Err(e) => {
                                    Translation::failed(&req, mode, format!("alignment: {e}"))
                                }
                            }
                        }
                        Err(e) => {
                            Translation::failed(&req, mode, format!("alignment backend: {e}"))
                        }
                    }
                } else {
                    translate(translator, &req, mode, None).map_err(ItemFailure::from)?
                };
                Ok(vec![(
                    problem_id.clone(),
                    StagePayload::Translated(translation),
                )])
            }
            StageTask::Check {
                problem_id,
                candidate_index,
                question,
                answer,
                statement,
            } => {
                let judge = self.client(Role::Judge);
                let faithfulness =
                    check_faithfulness(judge, question, answer, statement, self.config.checker)
                        .map_err(ItemFailure::from)?;
                Ok(vec![(
                    problem_id.clone(),
                    StagePayload::Checked(CheckRecord {
                        problem_id: problem_id.clone(),
                        candidate_index: *candidate_index,
                        faithfulness,
                    }),
                )])
            }
            StageTask::Prove { translation } => {
                let prover = self.client(Role::Prover);
                let outcome = prove(prover, translation, self.config.k_proof_attempts)
                    .map_err(ItemFailure::from)?;
                Ok(vec![(
                    translation.problem_id.clone(),
                    StagePayload::Proved(ProofRound {
                        problem_id: translation.problem_id.clone(),
                        candidate_index: translation.candidate_index,
                        requested: outcome.requested as u32,
                        parsed: outcome.parsed as u32,
                        deduplicated: outcome.deduplicated as u32,
                        attempts: outcome.attempts,
                    }),
                )])
            }
            StageTask::Verify { translation, round } => {
                let verdicts: Vec<(usize, Verdict)> = if round.attempts.is_empty() {
                    Vec::new()
                } else {
                    let sources: Vec<(String, String)> = round
                        .attempts
                        .iter()
                        .map(|a| (a.attempt_index.to_string(), a.source.clone()))
                        .collect();
                    let by_id = self
                        .verifier
                        .verify_batch(&sources)
                        .map_err(ItemFailure::from)?;
                    round
                        .attempts
                        .iter()
                        .map(|a| {
                            let verdict = by_id
                                .get(&a.attempt_index.to_string())
                                .cloned()
                                .expect("verifier returns one verdict per submitted id");
                            (a.attempt_index, verdict)
                        })
                        .collect()
                };
                let summary = aggregate(translation, &verdicts, self.config.checker);
                let record = VerificationRecord {
                    problem_id: round.problem_id.clone(),
                    candidate_index: round.candidate_index,
                    verified: summary.verified,
                    passing_attempt: summary.passing_attempt,
                    verdicts: verdicts
                        .into_iter()
                        .map(|(attempt_index, verdict)| AttemptVerdict {
                            attempt_index,
                            verdict,
                        })
                        .collect(),
                };
                Ok(vec![(
                    round.problem_id.clone(),
                    StagePayload::Verified(record),
                )])
            }
        }
    }
}

/// Resolve a config-relative path against the config file's directory.
fn resolve(base_dir: &Path, value: &str) -> PathBuf {
    let path = Path::new(value);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

/// A run bound to its directory: problems, folded state, log writer, backend
/// clients, and the proof verifier.
pub struct Pipeline {
    config: RunConfig,
    problems: Vec<Problem>,
    run_dir: PathBuf,
    fingerprint: String,
    log: RunLog,
    state: RunState,
    verifier: Verifier,
    clients: BTreeMap<Role, Client>,
}

impl Pipeline {
    /// Validate the config, load the dataset, open (or create) the run
    /// directory and log, and build the backend clients the configured
    /// stages will need. Relative paths resolve against `base_dir`.
    pub fn open(config: RunConfig, base_dir: &Path) -> Result<Pipeline, PipelineError> {
        config.validate().map_err(config_error)?;
        let dataset_path = resolve(base_dir, &config.dataset.path);
        let problems = load_dataset(
            &dataset_path,
            config.dataset.format,
            &config.dataset.fields,
            &config.dataset.dataset_name(),
        )
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        let run_dir = resolve(base_dir, &config.output.root).join(&config.run_id);
        std::fs::create_dir_all(&run_dir).map_err(|e| {
            PipelineError::Persistence(format!("create {}: {e}", run_dir.display()))
        })?;
        let fingerprint = config.fingerprint();
        let (log, state) = RunLog::open(&run_dir.join("log.jsonl"), &fingerprint)
            .map_err(log_error)?;
        let snapshot = run_dir.join("config.json");
        if !snapshot.exists() {
            let body = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
            std::fs::write(&snapshot, body).map_err(|e| {
                PipelineError::Persistence(format!("write {}: {e}", snapshot.display()))
            })?;
        }
        let verifier = Verifier::from_config(config.verification.clone(), base_dir)
            .map_err(|e| PipelineError::Config(e.to_string()))?
            .with_cache_file(run_dir.join("verdicts.jsonl"));
        let mut roles = vec![Role::Sampler, Role::Translator, Role::Prover];
        if config.checker != CheckerMode::Off {
            roles.push(Role::Judge);
        }
        if config
            .policies
            .iter()
            .any(|p| matches!(p, Policy::Orm | Policy::OrmFans))
        {
            roles.push(Role::Reward);
        }
        let mut clients = BTreeMap::new();
        for role in roles {
            let role_cfg = config.role_config(role).map_err(config_error)?;
            let client = build_client(&role_cfg, base_dir)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            clients.insert(role, client);
        }
        Ok(Pipeline {
            config,
            problems,
            run_dir,
            fingerprint,
            log,
            state,
            verifier,
            clients,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn stage_params(&self) -> StageParams {
        StageParams {
            n_samples: self.config.n_samples as usize,
            checker_enabled: self.config.checker != CheckerMode::Off,
            policies: self.config.policies.clone(),
        }
    }

    /// The stages `run` executes, in order; check only when configured.
    fn enabled_stages(&self) -> Vec<StageName> {
        let mut stages = vec![StageName::Sample, StageName::Translate];
        if self.config.checker != CheckerMode::Off {
            stages.push(StageName::Check);
        }
        stages.extend([
            StageName::Prove,
            StageName::Verify,
            StageName::Select,
            StageName::Report,
        ]);
        stages
    }

    /// Run every enabled stage in order, stopping at the first one that ends
    /// non-complete so downstream stages never consume partial data. The
    /// report is therefore only written when everything upstream finished.
    pub fn run_all(&mut self) -> Result<RunOutcome, PipelineError> {
        let mut stages = Vec::new();
        let mut status = RunStatus::Complete;
        for stage in self.enabled_stages() {
            let outcome = self.advance(stage)?;
            let stage_status = outcome.status();
            status = status.max(stage_status);
            tracing::info!(
                stage = stage.as_str(),
                pending = outcome.pending,
                completed = outcome.completed,
                "stage finished"
            );
            stages.push(outcome);
            if stage_status != RunStatus::Complete {
                break;
            }
        }
        Ok(RunOutcome { stages, status })
    }

    /// Run one stage explicitly. Unlike `run`, this enforces invocation
    /// order: a stage whose upstream has never produced records (and still
    /// has work to do) is a configuration error, not a silent no-op.
    pub fn run_stage(&mut self, stage: StageName) -> Result<StageOutcome, PipelineError> {
        if stage == StageName::Check && self.config.checker == CheckerMode::Off {
            return Err(PipelineError::Config(
                "the check stage needs a faithfulness checker; set checker = \"self\" or \
                 \"external\""
                    .into(),
            ));
        }
        self.ensure_ready(stage)?;
        self.advance(stage)
    }

    fn ensure_ready(&self, stage: StageName) -> Result<(), PipelineError> {
        let Some(predecessor) = stage.chain_predecessor() else {
            return Ok(());
        };
        if self.stage_started(predecessor) {
            Ok(())
        } else {
            Err(PipelineError::Config(format!(
                "cannot run `{stage}` yet: upstream stage `{}` has not produced records; run \
                 stages in pipeline order",
                producing_stage(predecessor)
            )))
        }
    }

    /// A record stage counts as started once it has records, or vacuously
    /// once it has nothing to do *and* its own upstream started (so an empty
    /// dataset, or a run whose translations all failed, still flows through).
    fn stage_started(&self, stage: Stage) -> bool {
        if self.record_count(stage) > 0 {
            return true;
        }
        let params = self.stage_params();
        if !pending_work(&self.state, stage, &self.problems, &params).is_empty() {
            return false;
        }
        match stage_chain_predecessor(stage) {
            None => true,
            Some(upstream) => self.stage_started(upstream),
        }
    }

    fn record_count(&self, stage: Stage) -> usize {
        match stage {
            Stage::Sampled => self.state.candidates.len(),
            Stage::Translated => self.state.translations.len(),
            Stage::Checked => self.state.checks.len(),
            Stage::Proved => self.state.proofs.len(),
            Stage::Verified => self.state.verifications.len(),
            Stage::Selected => self.state.selections.len(),
        }
    }

    fn advance(&mut self, stage: StageName) -> Result<StageOutcome, PipelineError> {
        match stage {
            StageName::Sample
            | StageName::Translate
            | StageName::Check
            | StageName::Prove
            | StageName::Verify => self.advance_workers(stage),
            StageName::Select => self.advance_select(),
            StageName::Report => self.advance_report(),
        }
    }

    /// Workers this stage may use: the operator's budget, capped by the
    /// in-flight limit of every backend role the stage calls.
    fn worker_count(&self, stage: StageName, tasks: usize) -> usize {
        let cap = match stage {
            StageName::Sample => {
                let sampler = self.clients[&Role::Sampler].config().in_flight_cap;
                match self.clients.get(&Role::Reward) {
                    Some(reward) => sampler.min(reward.config().in_flight_cap),
                    None => sampler,
                }
            }
            StageName::Translate => self.clients[&Role::Translator].config().in_flight_cap,
            StageName::Check => self.clients[&Role::Judge].config().in_flight_cap,
            StageName::Prove => self.clients[&Role::Prover].config().in_flight_cap,
            StageName::Verify => usize::MAX,
            StageName::Select | StageName::Report => 1,
        };
        self.config.output.workers.min(cap).min(tasks).max(1)
    }

    fn advance_workers(&mut self, stage: StageName) -> Result<StageOutcome, PipelineError> {
        let record_stage = stage.record_stage().expect("worker stages write records");
        let params = self.stage_params();
        let items = pending_work(&self.state, record_stage, &self.problems, &params);
        let pending = items.len();
        if items.is_empty() {
            return Ok(StageOutcome::idle(stage));
        }
        let tasks = self.resolve_tasks(&items)?;
        let workers = self.worker_count(stage, tasks.len());
        let fingerprint = self.fingerprint.clone();
        let ctx = StageCtx {
            config: &self.config,
            verifier: &self.verifier,
            clients: &self.clients,
        };
        let log = &mut self.log;
        let state = &mut self.state;
        let queue = Mutex::new(VecDeque::from(tasks));
        let tally = std::thread::scope(|scope| -> Result<Tally, PipelineError> {
            let (tx, rx) = mpsc::channel();
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                let ctx = &ctx;
                scope.spawn(move || loop {
                    let task = queue.lock().expect("task queue").pop_front();
                    let Some(task) = task else { break };
                    if tx.send(ctx.execute(&task)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // This loop is the run's single writer: records are appended and
            // folded here, in arrival order, while workers only compute.
            let mut tally = Tally::default();
            for outcome in rx {
                match outcome {
                    Ok(payloads) => {
                        for (problem_id, payload) in payloads {
                            let record = RunRecord::new(&problem_id, payload, &fingerprint);
                            match log.append(&record) {
                                Ok(true) => state.apply(record),
                                Ok(false) => {}
                                Err(e) => {
                                    queue.lock().expect("task queue").clear();
                                    return Err(log_error(e));
                                }
                            }
                        }
                        tally.completed += 1;
                    }
                    Err(failure) => tally.record_failure(failure),
                }
            }
            Ok(tally)
        })?;
        Ok(StageOutcome {
            stage,
            pending,
            completed: tally.completed,
            retryable_failures: tally.retryable,
            protocol_failures: tally.protocol,
            failures: tally.messages,
            files: Vec::new(),
        })
    }

    /// Turn pending work items into owned tasks. Lookups into run state are
    /// guaranteed by `pending_work`'s derivation; a log that references
    /// problems missing from the dataset is a configuration error.
    fn resolve_tasks(&self, items: &[WorkItem]) -> Result<Vec<StageTask>, PipelineError> {
        let by_id: BTreeMap<&str, &Problem> = self
            .problems
            .iter()
            .map(|p| (p.id.as_str(), p))
            .collect();
        let problem = |pid: &str| -> Result<&Problem, PipelineError> {
            by_id.get(pid).copied().ok_or_else(|| {
                PipelineError::Config(format!(
                    "run log references problem {pid:?} which is not in the dataset"
                ))
            })
        };
        items
            .iter()
            .map(|item| match item {
                WorkItem::Sample {
                    problem_id,
                    missing,
                } => {
                    let p = problem(problem_id)?;
                    Ok(StageTask::Sample {
                        problem_id: problem_id.clone(),
                        statement: p.statement.clone(),
                        missing: missing.clone(),
                    })
                }
                WorkItem::Translate {
                    problem_id,
                    candidate_index,
                } => {
                    let p = problem(problem_id)?;
                    let key = (problem_id.clone(), *candidate_index);
                    let candidate = self
                        .state
                        .candidates
                        .get(&key)
                        .expect("pending translate items have candidates");
                    Ok(StageTask::Translate {
                        problem_id: problem_id.clone(),
                        candidate_index: *candidate_index,
                        question: p.statement.clone(),
                        answer: raw_answer_text(candidate),
                    })
                }
                WorkItem::Check {
                    problem_id,
                    candidate_index,
                } => {
                    let p = problem(problem_id)?;
                    let key = (problem_id.clone(), *candidate_index);
                    let candidate = self
                        .state
                        .candidates
                        .get(&key)
                        .expect("pending check items have candidates");
                    let statement = self
                        .state
                        .translations
                        .get(&key)
                        .and_then(|t| t.statement.clone())
                        .expect("pending check items have ok translations");
                    Ok(StageTask::Check {
                        problem_id: problem_id.clone(),
                        candidate_index: *candidate_index,
                        question: p.statement.clone(),
                        answer: raw_answer_text(candidate),
                        statement,
                    })
                }
                WorkItem::Prove {
                    problem_id,
                    candidate_index,
                } => {
                    let key = (problem_id.clone(), *candidate_index);
                    let translation = self
                        .state
                        .translations
                        .get(&key)
                        .expect("pending prove items have translations")
                        .clone();
                    Ok(StageTask::Prove { translation })
                }
                WorkItem::Verify {
                    problem_id,
                    candidate_index,
                } => {
                    let key = (problem_id.clone(), *candidate_index);
                    let mut translation = self
                        .state
                        .translations
                        .get(&key)
                        .expect("pending verify items have translations")
                        .clone();
                    if let Some(effective) = self.state.faithfulness_of(&key) {
                        translation.faithfulness = effective;
                    }
                    let round = self
                        .state
                        .proofs
                        .get(&key)
                        .expect("pending verify items have proof rounds")
                        .clone();
                    Ok(StageTask::Verify { translation, round })
                }
                WorkItem::Select { .. } => {
                    unreachable!("select work never reaches the worker pool")
                }
            })
            .collect()
    }

    /// Selection is pure and cheap, so it runs inline on the calling thread.
    fn advance_select(&mut self) -> Result<StageOutcome, PipelineError> {
        let params = self.stage_params();
        let items = pending_work(&self.state, Stage::Selected, &self.problems, &params);
        let pending = items.len();
        if items.is_empty() {
            return Ok(StageOutcome::idle(StageName::Select));
        }
        let threshold = Threshold {
            min_votes: self.config.threshold_min_votes,
        };
        let gold_by_id: BTreeMap<&str, &str> = self
            .problems
            .iter()
            .map(|p| (p.id.as_str(), p.gold_answer.as_str()))
            .collect();
        let mut completed = 0usize;
        for item in items {
            let WorkItem::Select { problem_id, policy } = item else {
                continue;
            };
            let input = self.selection_input(&problem_id);
            let result = match policy {
                Policy::Mv => majority_vote(&input),
                Policy::Fans => fans_select(&input, threshold),
                Policy::Orm => orm_select(&input),
                Policy::OrmFans => orm_fans_select(&input),
                Policy::FansRemove => {
                    let gold_raw = gold_by_id.get(problem_id.as_str()).ok_or_else(|| {
                        PipelineError::Config(format!(
                            "run log references problem {problem_id:?} which is not in the dataset"
                        ))
                    })?;
                    let cleaned = fans_remove(&input, &normalize(gold_raw));
                    fans_select(&cleaned, threshold).map(|mut r| {
                        r.policy = Policy::FansRemove;
                        r
                    })
                }
            }
            .map_err(|e| {
                PipelineError::Config(format!(
                    "selection for {problem_id} under {policy}: {e}"
                ))
            })?;
            let record = RunRecord::new(&problem_id, StagePayload::Selected(result), &self.fingerprint);
            if self.log.append(&record).map_err(log_error)? {
                self.state.apply(record);
            }
            completed += 1;
        }
        Ok(StageOutcome {
            stage: StageName::Select,
            pending,
            completed,
            retryable_failures: 0,
            protocol_failures: 0,
            failures: Vec::new(),
            files: Vec::new(),
        })
    }

    /// Everything selection needs to know about one problem's candidates.
    fn selection_input(&self, problem_id: &str) -> SelectionInput {
        let lo = (problem_id.to_string(), 0usize);
        let hi = (problem_id.to_string(), usize::MAX);
        let candidates: Vec<(usize, Option<crate::mathtext::CanonicalAnswer>)> = self
            .state
            .candidates
            .range(lo.clone()..=hi.clone())
            .map(|((_, idx), c)| (*idx, c.answer.clone()))
            .collect();
        let verifications: BTreeMap<usize, bool> = self
            .state
            .verifications
            .range(lo.clone()..=hi.clone())
            .map(|((_, idx), v)| (*idx, v.verified))
            .collect();
        let mut scores = BTreeMap::new();
        let mut all_scored = !candidates.is_empty();
        for ((_, idx), candidate) in self.state.candidates.range(lo..=hi) {
            match candidate.score {
                Some(s) => {
                    scores.insert(*idx, s);
                }
                None => all_scored = false,
            }
        }
        SelectionInput {
            problem_id: problem_id.to_string(),
            candidates,
            verifications,
            scores: if all_scored { Some(scores) } else { None },
        }
    }

    /// Build the report from folded state and write every format. Emission
    /// is deterministic, so re-running it is byte-identical and harmless.
    fn advance_report(&mut self) -> Result<StageOutcome, PipelineError> {
        let gold = gold_map(&self.problems);
        let report = build_report(
            &self.state,
            &self.config.policies,
            &gold,
            self.config.n_samples,
            &self.config.run_id,
        );
        let dir = self.run_dir.join("report");
        let files = emit_report(&report, &ReportFormat::ALL, &dir)
            .map_err(|e| PipelineError::Persistence(e.to_string()))?;
        Ok(StageOutcome {
            stage: StageName::Report,
            pending: 1,
            completed: 1,
            retryable_failures: 0,
            protocol_failures: 0,
            failures: Vec::new(),
            files,
        })
    }
}

/// The answer text prompts should carry: the verbatim extracted span when it
/// still parses, else the canonical text recorded at sampling time.
fn raw_answer_text(candidate: &Candidate) -> String {
    match extract_answer(&candidate.completion) {
        Ok(found) if !found.raw.trim().is_empty() => found.raw,
        _ => candidate
            .answer
            .as_ref()
            .map(|a| a.text.clone())
            .unwrap_or_default(),
    }
}
