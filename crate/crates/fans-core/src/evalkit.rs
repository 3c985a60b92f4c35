//! Grading and metrics: pass@n, per-policy and per-subject accuracies,
//! relative-improvement cells, empirical translation/prover success rates,
//! the theoretical selection-gain model, and deterministic report emission
//! (markdown + CSV + JSONL record stream).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Problem, RunState};
use crate::mathtext::{equivalent, normalize, CanonicalAnswer};
use crate::select::Policy;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("relative improvement is undefined for a zero baseline")]
    UndefinedImprovement,
    #[error("gain-model field {field} must lie in [0,1], got {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("could not write report file {path}: {message}")]
    Io { path: String, message: String },
}

/// Did the selected answer match the benchmark ground truth?
pub fn grade(selected: &CanonicalAnswer, gold: &CanonicalAnswer) -> bool {
    equivalent(selected, gold)
}

/// Empirical any-of-n correctness over a candidate pool. (This is the
/// plain truth-table form, not the combinatorial unbiased estimator.)
pub fn pass_at_n(candidates: &[CanonicalAnswer], gold: &CanonicalAnswer) -> bool {
    candidates.iter().any(|c| grade(c, gold))
}

/// Exact percent change of `new_acc` over `old_acc`: 100 × (new − old) / old.
pub fn relative_improvement(new_acc: f64, old_acc: f64) -> Result<f64, EvalError> {
    if old_acc == 0.0 {
        return Err(EvalError::UndefinedImprovement);
    }
    Ok(100.0 * (new_acc - old_acc) / old_acc)
}

/// Round to 2 decimals, half away from zero, returning integer hundredths
/// (display value × 100). Avoids the round-half-to-even behavior of `{:.2}`.
fn half_up_hundredths(value: f64) -> i64 {
    let cents = (value.abs() * 100.0 + 0.5).floor() as i64;
    if value < 0.0 {
        -cents
    } else {
        cents
    }
}

/// Display form of an improvement percentage: signed, 2 decimals, half-up;
/// values that round to zero render as "-" per the tables' convention.
pub fn render_improvement(percent: f64) -> String {
    let cents = half_up_hundredths(percent);
    if cents == 0 {
        return "-".to_string();
    }
    let sign = if cents < 0 { "-" } else { "+" };
    let cents = cents.abs();
    format!("{sign}{}.{:02}", cents / 100, cents % 100)
}

/// An accuracy fraction as a percent cell with 2 half-up decimals
/// (0.338 → "33.80").
pub fn render_accuracy(fraction: f64) -> String {
    let cents = half_up_hundredths(fraction * 100.0);
    format!("{}.{:02}", cents / 100, cents % 100)
}

/// The improvement cell for a pair of accuracies, as displayed.
pub fn improvement_cell(new_acc: f64, old_acc: f64) -> Result<String, EvalError> {
    Ok(render_improvement(relative_improvement(new_acc, old_acc)?))
}

/// Expected selection gain when verification flips r1-accuracy problems up
/// toward the pool ceiling r2, discounted by translation success p and
/// prover success q.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainModel {
    /// NL→FL translation success rate.
    pub p: f64,
    /// Prover success rate (given a successful translation).
    pub q: f64,
    /// Baseline selection accuracy (e.g. majority vote).
    pub r1: f64,
    /// Candidate-pool ceiling (pass@n).
    pub r2: f64,
}

impl GainModel {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (field, value) in [
            ("p", self.p),
            ("q", self.q),
            ("r1", self.r1),
            ("r2", self.r2),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(EvalError::OutOfRange { field, value });
            }
        }
        Ok(())
    }
}

/// (r2 − r1) · p · q.
pub fn theoretical_gain(m: &GainModel) -> f64 {
    (m.r2 - m.r1) * m.p * m.q
}

/// Ground truth for grading: normalized gold answer plus the subject tag.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldEntry {
    pub answer: CanonicalAnswer,
    pub subject: Option<String>,
}

pub type GoldMap = BTreeMap<String, GoldEntry>;

pub fn gold_map(problems: &[Problem]) -> GoldMap {
    problems
        .iter()
        .map(|p| {
            (
                p.id.clone(),
                GoldEntry {
                    answer: normalize(&p.gold_answer),
                    subject: p.subject.clone(),
                },
            )
        })
        .collect()
}

/// Empirical success rates: p̂ for translation, q̂ for proving. `None` when
/// a denominator is zero (undefined, never reported as 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub p_hat: Option<f64>,
    pub q_hat: Option<f64>,
}

/// p̂ = faithful translations / attempted translations; q̂ = faithful
/// candidates with ≥1 passing proof / faithful candidates. "Faithful" means
/// the checker verdict when one exists, else parse success.
pub fn estimate_rates(state: &RunState) -> Rates {
    let attempted = state.translations.len();
    let mut faithful = 0usize;
    let mut proved = 0usize;
    for (key, translation) in &state.translations {
        let is_faithful = match state.checks.get(key) {
            Some(f) => f.is_faithful(),
            None => translation.ok(),
        };
        if !is_faithful {
            continue;
        }
        faithful += 1;
        if state
            .verifications
            .get(key)
            .is_some_and(|v| v.passing_attempt.is_some())
        {
            proved += 1;
        }
    }
    Rates {
        p_hat: (attempted > 0).then(|| faithful as f64 / attempted as f64),
        q_hat: (faithful > 0).then(|| proved as f64 / faithful as f64),
    }
}

/// Everything the report files are generated from. All maps are ordered so
/// emission is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub run_id: String,
    pub problems: usize,
    pub candidates: usize,
    pub verified_candidates: usize,
    /// Selections that fell back past their verified set, across policies.
    pub fallbacks: usize,
    /// Per-policy accuracy over graded problems. Policies without selection
    /// records are absent, not zero.
    pub accuracy: BTreeMap<Policy, f64>,
    /// Problems graded per policy.
    pub graded: BTreeMap<Policy, usize>,
    /// Per-subject accuracy, for subjects present in the dataset.
    pub subject_accuracy: BTreeMap<Policy, BTreeMap<String, f64>>,
    pub subject_graded: BTreeMap<Policy, BTreeMap<String, usize>>,
    /// pass@n for every n up to the sampling budget.
    pub pass_at: BTreeMap<u32, f64>,
    /// Display cells for the configured policy-vs-baseline pairs
    /// (e.g. "fans_vs_mv" → "+7.69").
    pub improvements: BTreeMap<String, String>,
    pub rates: Rates,
}

/// Improvement pairs reported when both sides are present.
const IMPROVEMENT_PAIRS: [(Policy, Policy); 3] = [
    (Policy::Fans, Policy::Mv),
    (Policy::OrmFans, Policy::Orm),
    (Policy::FansRemove, Policy::Fans),
];

/// Compute every report field from a run state. `n_samples` bounds the
/// pass@n sweep; grading uses the gold map, so problems missing from it are
/// ignored.
pub fn build_report(
    state: &RunState,
    policies: &[Policy],
    gold: &GoldMap,
    n_samples: u32,
    run_id: &str,
) -> Report {
    let mut accuracy = BTreeMap::new();
    let mut graded_map = BTreeMap::new();
    let mut subject_accuracy: BTreeMap<Policy, BTreeMap<String, f64>> = BTreeMap::new();
    let mut subject_graded: BTreeMap<Policy, BTreeMap<String, usize>> = BTreeMap::new();
    let mut fallbacks = 0usize;

    for policy in policies {
        let mut graded = 0usize;
        let mut correct = 0usize;
        let mut by_subject: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (pid, entry) in gold {
            let Some(selection) = state.selections.get(&(pid.clone(), *policy)) else {
                continue;
            };
            if selection.used_fallback {
                fallbacks += 1;
            }
            graded += 1;
            let ok = grade(&selection.chosen_answer, &entry.answer);
            if ok {
                correct += 1;
            }
            if let Some(subject) = &entry.subject {
                let slot = by_subject.entry(subject.clone()).or_default();
                slot.0 += 1;
                if ok {
                    slot.1 += 1;
                }
            }
        }
        if graded == 0 {
            continue; // absent, not zero
        }
        accuracy.insert(*policy, correct as f64 / graded as f64);
        graded_map.insert(*policy, graded);
        for (subject, (total, right)) in by_subject {
            subject_accuracy
                .entry(*policy)
                .or_default()
                .insert(subject.clone(), right as f64 / total as f64);
            subject_graded
                .entry(*policy)
                .or_default()
                .insert(subject, total);
        }
    }

    let mut pass_at = BTreeMap::new();
    if !gold.is_empty() {
        for n in 1..=n_samples {
            let mut hits = 0usize;
            for (pid, entry) in gold {
                let any = (0..n as usize).any(|idx| {
                    state
                        .candidates
                        .get(&(pid.clone(), idx))
                        .and_then(|c| c.answer.as_ref())
                        .is_some_and(|a| grade(a, &entry.answer))
                });
                if any {
                    hits += 1;
                }
            }
            pass_at.insert(n, hits as f64 / gold.len() as f64);
        }
    }

    let mut improvements = BTreeMap::new();
    for (new_policy, baseline) in IMPROVEMENT_PAIRS {
        let (Some(new_acc), Some(old_acc)) =
            (accuracy.get(&new_policy), accuracy.get(&baseline))
        else {
            continue;
        };
        // Report in percent points, as the accuracy tables do.
        if let Ok(cell) = improvement_cell(new_acc * 100.0, old_acc * 100.0) {
            improvements.insert(format!("{new_policy}_vs_{baseline}"), cell);
        }
    }

    Report {
        run_id: run_id.to_string(),
        problems: gold.len(),
        candidates: state.candidates.len(),
        verified_candidates: state.verifications.values().filter(|v| v.verified).count(),
        fallbacks,
        accuracy,
        graded: graded_map,
        subject_accuracy,
        subject_graded,
        pass_at,
        improvements,
        rates: estimate_rates(state),
    }
}

/// Report file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    MarkdownTable,
    Csv,
    RecordStream,
}

impl ReportFormat {
    pub fn file_name(&self) -> &'static str {
        match self {
            ReportFormat::MarkdownTable => "report.md",
            ReportFormat::Csv => "report.csv",
            ReportFormat::RecordStream => "report.jsonl",
        }
    }

    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::MarkdownTable,
        ReportFormat::Csv,
        ReportFormat::RecordStream,
    ];
}

/// Subjects present anywhere in the report, sorted.
fn subjects_of(report: &Report) -> Vec<String> {
    let mut subjects: Vec<String> = report
        .subject_accuracy
        .values()
        .flat_map(|m| m.keys().cloned())
        .collect();
    subjects.sort();
    subjects.dedup();
    subjects
}

fn markdown_of(report: &Report) -> String {
    let subjects = subjects_of(report);
    let mut out = String::new();
    out.push_str(&format!("# Run {}\n\n", report.run_id));
    out.push_str(&format!(
        "{} problems, {} candidates sampled, {} verified, {} fallback selections.\n\n",
        report.problems, report.candidates, report.verified_candidates, report.fallbacks
    ));

    // Accuracy table: policy rows × subject columns, Total last, with an
    // italicized improvement row under each compared policy.
    out.push_str("| Policy |");
    for s in &subjects {
        out.push_str(&format!(" {s} |"));
    }
    out.push_str(" Total |\n|---|");
    for _ in &subjects {
        out.push_str("---|");
    }
    out.push_str("---|\n");
    let subject_cell = |policy: Policy, subject: &str| -> String {
        report
            .subject_accuracy
            .get(&policy)
            .and_then(|m| m.get(subject))
            .map(|v| render_accuracy(*v))
            .unwrap_or_else(|| "n/a".to_string())
    };
    for (policy, acc) in &report.accuracy {
        out.push_str(&format!("| {policy} |"));
        for s in &subjects {
            out.push_str(&format!(" {} |", subject_cell(*policy, s)));
        }
        out.push_str(&format!(" {} |\n", render_accuracy(*acc)));
        for (new_policy, baseline) in IMPROVEMENT_PAIRS {
            if new_policy != *policy {
                continue;
            }
            let Some(total_cell) = report
                .improvements
                .get(&format!("{new_policy}_vs_{baseline}"))
            else {
                continue;
            };
            out.push_str(&format!("| *{new_policy} vs {baseline}* |"));
            for s in &subjects {
                let cell = match (
                    report
                        .subject_accuracy
                        .get(&new_policy)
                        .and_then(|m| m.get(s)),
                    report.subject_accuracy.get(&baseline).and_then(|m| m.get(s)),
                ) {
                    (Some(new_acc), Some(old_acc)) => {
                        improvement_cell(new_acc * 100.0, old_acc * 100.0)
                            .unwrap_or_else(|_| "n/a".to_string())
                    }
                    _ => "n/a".to_string(),
                };
                out.push_str(&format!(" *{cell}* |"));
            }
            out.push_str(&format!(" *{total_cell}* |\n"));
        }
    }

    out.push_str("\n## pass@n\n\n| n | accuracy |\n|---|---|\n");
    for (n, v) in &report.pass_at {
        out.push_str(&format!("| {n} | {} |\n", render_accuracy(*v)));
    }

    out.push_str("\n## Rates\n\n");
    let rate = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    out.push_str(&format!(
        "- translation success p̂: {}\n- prover success q̂: {}\n",
        rate(report.rates.p_hat),
        rate(report.rates.q_hat)
    ));
    out
}

fn csv_of(report: &Report) -> String {
    let mut out = String::from("policy,subject,graded,accuracy\n");
    for (policy, acc) in &report.accuracy {
        for (subject, value) in report
            .subject_accuracy
            .get(policy)
            .into_iter()
            .flatten()
        {
            let graded = report
                .subject_graded
                .get(policy)
                .and_then(|m| m.get(subject))
                .copied()
                .unwrap_or(0);
            out.push_str(&format!(
                "{policy},{},{graded},{:.4}\n",
                csv_field(subject),
                value
            ));
        }
        let graded = report.graded.get(policy).copied().unwrap_or(0);
        out.push_str(&format!("{policy},total,{graded},{acc:.4}\n"));
    }
    for (n, v) in &report.pass_at {
        out.push_str(&format!("pass@{n},total,{},{v:.4}\n", report.problems));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn record_stream_of(report: &Report) -> String {
    #[derive(Serialize)]
    #[serde(tag = "record", rename_all = "snake_case")]
    enum Line<'a> {
        Run {
            run_id: &'a str,
            problems: usize,
            candidates: usize,
            verified_candidates: usize,
            fallbacks: usize,
        },
        Accuracy {
            policy: Policy,
            subject: Option<&'a str>,
            graded: usize,
            accuracy: f64,
        },
        PassAt {
            n: u32,
            accuracy: f64,
        },
        Improvement {
            comparison: &'a str,
            cell: &'a str,
        },
        Rates {
            p_hat: Option<f64>,
            q_hat: Option<f64>,
        },
    }
    let mut lines = Vec::new();
    lines.push(Line::Run {
        run_id: &report.run_id,
        problems: report.problems,
        candidates: report.candidates,
        verified_candidates: report.verified_candidates,
        fallbacks: report.fallbacks,
    });
    for (policy, acc) in &report.accuracy {
        for (subject, value) in report.subject_accuracy.get(policy).into_iter().flatten() {
            lines.push(Line::Accuracy {
                policy: *policy,
                subject: Some(subject),
                graded: report
                    .subject_graded
                    .get(policy)
                    .and_then(|m| m.get(subject))
                    .copied()
                    .unwrap_or(0),
                accuracy: *value,
            });
        }
        lines.push(Line::Accuracy {
            policy: *policy,
            subject: None,
            graded: report.graded.get(policy).copied().unwrap_or(0),
            accuracy: *acc,
        });
    }
    for (n, v) in &report.pass_at {
        lines.push(Line::PassAt {
            n: *n,
            accuracy: *v,
        });
    }
    for (comparison, cell) in &report.improvements {
        lines.push(Line::Improvement { comparison, cell });
    }
    lines.push(Line::Rates {
        p_hat: report.rates.p_hat,
        q_hat: report.rates.q_hat,
    });
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(&line).expect("report lines serialize"));
        out.push('\n');
    }
    out
}

/// Write the requested formats into `dir`, returning the paths written.
/// Identical reports produce byte-identical files.
pub fn emit_report(
    report: &Report,
    formats: &[ReportFormat],
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let io = |path: &Path, e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    let mut formats: Vec<ReportFormat> = formats.to_vec();
    formats.sort();
    formats.dedup();
    for format in formats {
        let content = match format {
            ReportFormat::MarkdownTable => markdown_of(report),
            ReportFormat::Csv => csv_of(report),
            ReportFormat::RecordStream => record_stream_of(report),
        };
        let path = dir.join(format.file_name());
        std::fs::write(&path, content).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        Candidate, CheckRecord, RunRecord, StagePayload, VerificationRecord,
    };
    use crate::formalize::{Faithfulness, Translation, TranslationMode};
    use crate::select::SelectionResult;

    #[test]
    fn grading_follows_answer_equivalence() {
        assert!(grade(&normalize("-5"), &normalize("-5")));
        assert!(grade(
            &normalize("(3,\\frac{\\pi}{2})"),
            &normalize("(3,(pi)/(2))")
        ));
        assert!(!grade(&normalize("7"), &normalize("5")));
    }

    #[test]
    fn pass_at_n_is_any_of_n_and_monotone() {
        let gold = normalize("5");
        let pool = [normalize("3"), normalize("4"), normalize("5")];
        assert!(pass_at_n(&pool, &gold));
        assert!(!pass_at_n(&pool[..2], &gold));
        assert!(!pass_at_n(&[], &gold));
        // Monotone: extending a pool never flips true → false.
        for split in 0..=pool.len() {
            if pass_at_n(&pool[..split], &gold) {
                assert!(pass_at_n(&pool[..pool.len()], &gold));
            }
        }
    }

    #[test]
    fn improvement_cells_match_the_published_convention() {
        assert_eq!(improvement_cell(36.40, 33.80).unwrap(), "+7.69");
        assert_eq!(improvement_cell(45.97, 42.74).unwrap(), "+7.56");
        assert_eq!(improvement_cell(15.00, 12.50).unwrap(), "+20.00");
        assert_eq!(improvement_cell(66.13, 61.29).unwrap(), "+7.90");
        assert_eq!(improvement_cell(50.0, 50.0).unwrap(), "-");
        assert_eq!(improvement_cell(45.0, 50.0).unwrap(), "-10.00");
        assert_eq!(
            relative_improvement(1.0, 0.0),
            Err(EvalError::UndefinedImprovement)
        );
    }

    #[test]
    fn display_rounding_is_half_up_not_bankers() {
        // 7.565 would round to 7.56 under round-half-to-even.
        assert_eq!(render_improvement(7.565), "+7.57");
        assert_eq!(render_improvement(-7.565), "-7.57");
        assert_eq!(render_accuracy(0.338), "33.80");
        assert_eq!(render_accuracy(0.51805), "51.81");
        assert_eq!(render_accuracy(1.0), "100.00");
    }

    #[test]
    fn theoretical_gain_matches_its_closed_form() {
        let m = GainModel {
            p: 1.0,
            q: 1.0,
            r1: 0.3,
            r2: 0.5,
        };
        m.validate().unwrap();
        assert!((theoretical_gain(&m) - 0.2).abs() < 1e-15);
        let half = GainModel {
            p: 0.5,
            q: 0.5,
            r1: 0.3880,
            r2: 0.5180,
        };
        assert!((theoretical_gain(&half) - 0.0325).abs() < 1e-12);
        let degenerate = GainModel {
            p: 0.9,
            q: 0.2,
            r1: 0.4,
            r2: 0.4,
        };
        assert_eq!(theoretical_gain(&degenerate), 0.0);
        assert!(GainModel {
            p: 1.5,
            ..m
        }
        .validate()
        .is_err());
    }

    fn candidate(pid: &str, idx: usize, answer: Option<&str>) -> RunRecord {
        RunRecord::new(
            pid,
            StagePayload::Sampled(Candidate {
                problem_id: pid.to_string(),
                candidate_index: idx,
                completion: String::new(),
                answer: answer.map(normalize),
                extraction_error: None,
                score: None,
            }),
            "fp",
        )
    }

    fn translation(pid: &str, idx: usize, ok: bool) -> RunRecord {
        RunRecord::new(
            pid,
            StagePayload::Translated(Translation {
                problem_id: pid.to_string(),
                candidate_index: idx,
                statement: ok.then(|| "theorem t : 1 = 1 := by".to_string()),
                failure: (!ok).then(|| "no lean4 code in completion".to_string()),
                cot: None,
                mode: TranslationMode::FewShot,
                faithfulness: Faithfulness::Unchecked,
            }),
            "fp",
        )
    }

    fn verification(pid: &str, idx: usize, passing: bool) -> RunRecord {
        RunRecord::new(
            pid,
            StagePayload::Verified(VerificationRecord {
                problem_id: pid.to_string(),
                candidate_index: idx,
                verified: passing,
                passing_attempt: passing.then_some(0),
                verdicts: vec![],
            }),
            "fp",
        )
    }

    fn selection(pid: &str, policy: Policy, answer: &str, fallback: bool) -> RunRecord {
        RunRecord::new(
            pid,
            StagePayload::Selected(SelectionResult {
                policy,
                chosen_index: 0,
                chosen_answer: normalize(answer),
                votes: None,
                score: None,
                used_fallback: fallback,
                verified_winner: false,
                degenerate: false,
            }),
            "fp",
        )
    }

    fn problem(id: &str, gold: &str, subject: Option<&str>) -> Problem {
        Problem {
            id: id.to_string(),
            statement: format!("Problem {id}"),
            gold_answer: gold.to_string(),
            subject: subject.map(|s| s.to_string()),
            level: None,
        }
    }

    #[test]
    fn rates_use_checker_verdicts_when_present_else_parse_success() {
        let mut state = RunState::default();
        // Four attempted translations: three parse, one fails.
        for (idx, ok) in [(0, true), (1, true), (2, true), (3, false)] {
            state.apply(translation("p1", idx, ok));
        }
        // Without checks: p̂ = 3/4. One of the parsed has a passing proof.
        state.apply(verification("p1", 0, true));
        let rates = estimate_rates(&state);
        assert_eq!(rates.p_hat, Some(0.75));
        assert_eq!(rates.q_hat, Some(1.0 / 3.0));

        // A check record overrides parse success: candidate 1 judged
        // unfaithful shrinks both the numerator of p̂ and q̂'s denominator.
        state.apply(RunRecord::new(
            "p1",
            StagePayload::Checked(CheckRecord {
                problem_id: "p1".to_string(),
                candidate_index: 1,
                faithfulness: Faithfulness::Unfaithful,
            }),
            "fp",
        ));
        let rates = estimate_rates(&state);
        assert_eq!(rates.p_hat, Some(0.5));
        assert_eq!(rates.q_hat, Some(0.5));
    }

    #[test]
    fn undefined_rates_are_none_not_zero() {
        let rates = estimate_rates(&RunState::default());
        assert_eq!(rates.p_hat, None);
        assert_eq!(rates.q_hat, None);
        let mut state = RunState::default();
        state.apply(translation("p1", 0, false));
        let rates = estimate_rates(&state);
        assert_eq!(rates.p_hat, Some(0.0));
        assert_eq!(rates.q_hat, None, "no faithful candidates → q̂ undefined");
    }

    fn two_problem_state() -> (RunState, Vec<Problem>) {
        let mut state = RunState::default();
        let problems = vec![
            problem("p1", "5", Some("Algebra")),
            problem("p2", "7", Some("Number Theory")),
        ];
        // p1: two candidates, second one correct; p2: both wrong.
        state.apply(candidate("p1", 0, Some("3")));
        state.apply(candidate("p1", 1, Some("5")));
        state.apply(candidate("p2", 0, Some("1")));
        state.apply(candidate("p2", 1, Some("2")));
        state.apply(verification("p1", 1, true));
        state.apply(selection("p1", Policy::Mv, "5", false));
        state.apply(selection("p2", Policy::Mv, "1", false));
        state.apply(selection("p1", Policy::Fans, "5", false));
        state.apply(selection("p2", Policy::Fans, "1", true));
        (state, problems)
    }

    #[test]
    fn reports_count_accuracy_subjects_passes_and_fallbacks() {
        let (state, problems) = two_problem_state();
        let gold = gold_map(&problems);
        let report = build_report(
            &state,
            &[Policy::Mv, Policy::Fans, Policy::Orm],
            &gold,
            2,
            "test-run",
        );
        assert_eq!(report.problems, 2);
        assert_eq!(report.candidates, 4);
        assert_eq!(report.verified_candidates, 1);
        assert_eq!(report.fallbacks, 1);
        assert_eq!(report.accuracy[&Policy::Mv], 0.5);
        assert_eq!(report.accuracy[&Policy::Fans], 0.5);
        assert!(
            !report.accuracy.contains_key(&Policy::Orm),
            "policies without selections are absent, not zero"
        );
        assert_eq!(report.subject_accuracy[&Policy::Mv]["Algebra"], 1.0);
        assert_eq!(report.subject_accuracy[&Policy::Mv]["Number Theory"], 0.0);
        assert_eq!(report.pass_at[&1], 0.0);
        assert_eq!(report.pass_at[&2], 0.5);
        assert_eq!(report.improvements["fans_vs_mv"], "-");
        // fans ≤ pass@2 bound holds on this run.
        assert!(report.accuracy[&Policy::Fans] <= report.pass_at[&2]);
    }

    #[test]
    fn emission_is_deterministic_and_complete() {
        let (state, problems) = two_problem_state();
        let gold = gold_map(&problems);
        let report = build_report(&state, &[Policy::Mv, Policy::Fans], &gold, 2, "t");
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = emit_report(&report, &ReportFormat::ALL, dir_a.path()).unwrap();
        let b = emit_report(&report, &ReportFormat::ALL, dir_b.path()).unwrap();
        assert_eq!(a.len(), 3);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "emission differed between directories"
            );
        }
        // Re-emitting over the same directory is also byte-stable.
        let again = emit_report(&report, &ReportFormat::ALL, dir_a.path()).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn markdown_mirrors_the_table_layout() {
        let (state, problems) = two_problem_state();
        let gold = gold_map(&problems);
        let report = build_report(&state, &[Policy::Mv, Policy::Fans], &gold, 2, "t");
        let md = markdown_of(&report);
        assert!(md.contains("| Policy | Algebra | Number Theory | Total |"));
        assert!(md.contains("| mv | 100.00 | 0.00 | 50.00 |"));
        // Algebra: both 100.00 → zero delta renders "-". Number Theory: the
        // baseline is 0.00, so the ratio is undefined → "n/a".
        assert!(md.contains("| *fans vs mv* | *-* | *n/a* | *-* |"));
        assert!(md.contains("| 2 | 50.00 |"));
    }

    #[test]
    fn csv_has_one_row_per_policy_and_subject() {
        let (state, problems) = two_problem_state();
        let gold = gold_map(&problems);
        let report = build_report(&state, &[Policy::Mv], &gold, 2, "t");
        let csv = csv_of(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "policy,subject,graded,accuracy");
        assert!(lines.contains(&"mv,Algebra,1,1.0000"));
        assert!(lines.contains(&"mv,Number Theory,1,0.0000"));
        assert!(lines.contains(&"mv,total,2,0.5000"));
        assert!(lines.contains(&"pass@2,total,2,0.5000"));
    }

    #[test]
    fn record_stream_lines_are_individually_parseable() {
        let (state, problems) = two_problem_state();
        let gold = gold_map(&problems);
        let report = build_report(&state, &[Policy::Mv, Policy::Fans], &gold, 2, "t");
        let stream = record_stream_of(&report);
        let mut kinds = Vec::new();
        for line in stream.lines() {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            kinds.push(value["record"].as_str().unwrap().to_string());
        }
        assert_eq!(kinds.first().map(String::as_str), Some("run"));
        assert!(kinds.iter().any(|k| k == "accuracy"));
        assert!(kinds.iter().any(|k| k == "pass_at"));
        assert!(kinds.iter().any(|k| k == "improvement"));
        assert_eq!(kinds.last().map(String::as_str), Some("rates"));
    }
}
