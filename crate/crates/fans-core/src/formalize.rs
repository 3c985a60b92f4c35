//! Natural language → Lean4 statement formalization: prompt rendering (from
//! versioned text assets), completion parsing, the optional NL alignment
//! rewrite, and the faithfulness check that gates the verified set.
//!
//! Rendering is pure: the same `(problem, answer, mode)` always yields
//! byte-identical prompts. Parsing strips only a whitelist of known fence
//! artifacts (trailing `&`), never repairing model output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatMessage, Client};

/// Answer-sampling prompt (fills `{{QUESTION}}`).
pub const PROMPT_SAMPLE_ANSWER: &str = include_str!("../prompts/sample_answer.txt");
/// Two-example few-shot translation prompt (fills `{{STATEMENT}}`).
pub const PROMPT_TRANSLATE_FEW_SHOT: &str = include_str!("../prompts/translate_few_shot.txt");
/// Long-CoT translation prompt with `<Thought>` primer (fills `{{TITLE}}`
/// twice and `{{STATEMENT}}`).
pub const PROMPT_TRANSLATE_LONG_COT: &str = include_str!("../prompts/translate_long_cot.txt");
/// NL alignment prompt (fills `{{QUESTION}}` and `{{ANSWER}}`).
pub const PROMPT_ALIGN_NL: &str = include_str!("../prompts/align_nl.txt");
/// Faithfulness judge prompt (fills `{{QUESTION}}`, `{{ANSWER}}`,
/// `{{STATEMENT}}`).
pub const PROMPT_JUDGE_FAITHFULNESS: &str = include_str!("../prompts/judge_faithfulness.txt");

/// How the translator is prompted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMode {
    FewShot,
    LongCot,
}

/// Which faithfulness checker runs after translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckerMode {
    #[default]
    Off,
    #[serde(rename = "self")]
    SelfCheck,
    External,
}

/// Verdict on whether a Lean4 statement matches its NL (question, answer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Faithfulness {
    /// No judge was invoked.
    Unchecked,
    FaithfulSelf,
    FaithfulExternal,
    Unfaithful,
    /// Judge replied, but no verdict token could be parsed (terminal).
    Undecided,
}

impl Faithfulness {
    /// Whether a candidate with this verdict may enter a verified set.
    /// Unchecked statements are eligible only when no checker is configured;
    /// unfaithful and undecided never are (a doubtful translation must not
    /// create a false positive).
    pub fn admits_verification(self, checker: CheckerMode) -> bool {
        match self {
            Faithfulness::Unchecked => checker == CheckerMode::Off,
            Faithfulness::FaithfulSelf | Faithfulness::FaithfulExternal => true,
            Faithfulness::Unfaithful | Faithfulness::Undecided => false,
        }
    }

    /// Whether a judge affirmed this translation.
    pub fn is_faithful(self) -> bool {
        matches!(
            self,
            Faithfulness::FaithfulSelf | Faithfulness::FaithfulExternal
        )
    }
}

/// One candidate's translation outcome: a parsed statement or a terminal
/// failure, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub problem_id: String,
    pub candidate_index: usize,
    /// Lean4 theorem header (contains "theorem", no "sorry"), present on
    /// success.
    pub statement: Option<String>,
    /// Terminal failure description, present when statement is absent.
    pub failure: Option<String>,
    /// Full Long-CoT transcript when the mode produces one.
    pub cot: Option<String>,
    pub mode: TranslationMode,
    pub faithfulness: Faithfulness,
}

impl Translation {
    pub fn ok(&self) -> bool {
        self.statement.is_some()
    }

    pub(crate) fn failed(
        req: &TranslationRequest<'_>,
        mode: TranslationMode,
        failure: String,
    ) -> Self {
        Translation {
            problem_id: req.problem_id.to_string(),
            candidate_index: req.candidate_index,
            statement: None,
            failure: Some(failure),
            cot: None,
            mode,
            faithfulness: Faithfulness::Unchecked,
        }
    }
}

/// A problem statement rewritten into "Let/If … Prove that …" form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedStatement {
    pub problem_id: String,
    pub text: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormalizeError {
    #[error("cannot formalize an empty answer")]
    EmptyAnswer,
    #[error("no lean4 code in completion")]
    NoLeanFence,
    #[error("lean4 code without a theorem declaration")]
    NoTheorem,
    #[error("no <Output> region in Long-CoT completion")]
    MissingOutputRegion,
    #[error("statement contains a placeholder tactic")]
    PlaceholderInStatement,
    #[error("alignment model produced empty output")]
    EmptyAlignment,
}

/// The NL theorem statement form handed to the translator.
pub fn nl_statement(question: &str, answer: &str) -> String {
    format!("{question} Show that it is: {answer}.")
}

/// Lean-friendly theorem title derived from the problem id.
pub fn lean_title(problem_id: &str) -> String {
    let mut title: String = problem_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if !title.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
        title.insert_str(0, "problem_");
    }
    title
}

/// Render the answer-sampling prompt for a question.
pub fn render_sample_prompt(question: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(
        PROMPT_SAMPLE_ANSWER.replace("{{QUESTION}}", question),
    )]
}

/// Render the translation prompt for a statement that is already in
/// proof-problem form (either composed by [`nl_statement`] or rewritten by
/// the aligner), with no further composition.
pub fn render_statement_prompt(
    problem_id: &str,
    statement: &str,
    mode: TranslationMode,
) -> Vec<ChatMessage> {
    let content = match mode {
        TranslationMode::FewShot => PROMPT_TRANSLATE_FEW_SHOT.replace("{{STATEMENT}}", statement),
        TranslationMode::LongCot => PROMPT_TRANSLATE_LONG_COT
            .replace("{{TITLE}}", &lean_title(problem_id))
            .replace("{{STATEMENT}}", statement),
    };
    vec![ChatMessage::user(content)]
}

/// Render the translation prompt for a (question, answer) pair.
pub fn render_translation_prompt(
    problem_id: &str,
    question: &str,
    answer: &str,
    mode: TranslationMode,
) -> Result<Vec<ChatMessage>, FormalizeError> {
    if answer.trim().is_empty() {
        return Err(FormalizeError::EmptyAnswer);
    }
    let statement = nl_statement(question, answer);
    Ok(render_statement_prompt(problem_id, &statement, mode))
}

/// Render the NL alignment prompt.
pub fn render_align_prompt(question: &str, answer: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(
        PROMPT_ALIGN_NL
            .replace("{{QUESTION}}", question)
            .replace("{{ANSWER}}", answer),
    )]
}

/// Render the faithfulness-judge prompt.
pub fn render_judge_prompt(question: &str, answer: &str, statement: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(
        PROMPT_JUDGE_FAITHFULNESS
            .replace("{{QUESTION}}", question)
            .replace("{{ANSWER}}", answer)
            .replace("{{STATEMENT}}", statement),
    )]
}

/// Pull the Lean4 statement out of a translator completion.
///
/// Few-shot prompts end inside an open ```lean4 fence, so a completion that
/// starts directly with `theorem …` is accepted as a fence continuation; an
/// explicit ```lean4 opener is accepted in both modes. Long-CoT parsing is
/// restricted to the `<Output>` region (a missing closing tag extends the
/// region to the end — models drop closers — but a missing opener is an
/// error). The statement is truncated right after the first `:= by` when the
/// model over-generates a proof body, and a trailing `&` fence artifact is
/// stripped.
pub fn parse_lean_statement(
    completion: &str,
    mode: TranslationMode,
) -> Result<String, FormalizeError> {
    let region = match mode {
        TranslationMode::FewShot => completion,
        TranslationMode::LongCot => {
            let start = completion
                .find("<Output>")
                .ok_or(FormalizeError::MissingOutputRegion)?;
            let region = &completion[start + "<Output>".len()..];
            match region.find("</Output>") {
                Some(end) => &region[..end],
                None => region,
            }
        }
    };
    let code = if let Some(pos) = region.find("```lean4") {
        &region[pos + "```lean4".len()..]
    } else if mode == TranslationMode::FewShot && region.trim_start().starts_with("theorem") {
        region
    } else {
        return Err(FormalizeError::NoLeanFence);
    };
    let code = match code.find("```") {
        Some(end) => &code[..end],
        None => code,
    };
    let mut statement = code.trim();
    // Whitelisted fence artifact: a stray '&' glued to the code.
    statement = statement.strip_suffix('&').unwrap_or(statement).trim_end();
    if !statement.contains("theorem") {
        return Err(FormalizeError::NoTheorem);
    }
    if statement.contains("sorry") {
        return Err(FormalizeError::PlaceholderInStatement);
    }
    // Keep the header only: cut right after the first ":= by" (any spacing).
    let re = regex::Regex::new(r":=\s*by\b").expect("static regex");
    let statement = match re.find(statement) {
        Some(m) => statement[..m.end()].trim_start(),
        None => statement,
    };
    Ok(statement.to_string())
}

/// Pull the aligned statement out of an aligner completion: the first
/// md-fenced block when present, the whole text otherwise.
pub fn parse_alignment(completion: &str) -> Result<String, FormalizeError> {
    let text = if let Some(pos) = completion.find("```md").or_else(|| completion.find("``` md")) {
        let after = &completion[pos..];
        let after = &after[after.find('\n').map_or(after.len(), |i| i + 1)..];
        match after.find("```") {
            Some(end) => &after[..end],
            None => after,
        }
    } else {
        completion
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(FormalizeError::EmptyAlignment);
    }
    Ok(text.to_string())
}

/// Rewrite a (question, answer) pair into the aligned proof-problem form.
pub fn align_nl(
    aligner: &Client,
    problem_id: &str,
    question: &str,
    answer: &str,
) -> Result<AlignedStatement, BackendError> {
    let completions = aligner.chat(&render_align_prompt(question, answer))?;
    let text = parse_alignment(&completions[0]).map_err(|e| BackendError::Protocol {
        role: aligner.role(),
        excerpt: e.to_string(),
    })?;
    Ok(AlignedStatement {
        problem_id: problem_id.to_string(),
        text,
    })
}

/// Parse a judge completion into a verdict: the LAST recognizable token among
/// faithful/unfaithful/yes/no (case-insensitive, whole words) decides.
pub fn parse_judge_verdict(completion: &str) -> Option<bool> {
    let mut verdict = None;
    for token in completion.split(|c: char| !c.is_ascii_alphabetic()) {
        match token.to_ascii_lowercase().as_str() {
            "faithful" | "yes" => verdict = Some(true),
            "unfaithful" | "no" => verdict = Some(false),
            _ => {}
        }
    }
    verdict
}

/// Ask the judge whether the statement matches the NL (question, answer).
/// Backend failures propagate (the caller may retry later); an unparseable
/// reply is a terminal `Undecided`.
pub fn check_faithfulness(
    judge: &Client,
    question: &str,
    answer: &str,
    statement: &str,
    checker: CheckerMode,
) -> Result<Faithfulness, BackendError> {
    if checker == CheckerMode::Off {
        return Ok(Faithfulness::Unchecked);
    }
    let completions = judge.chat(&render_judge_prompt(question, answer, statement))?;
    Ok(match parse_judge_verdict(&completions[0]) {
        Some(true) => match checker {
            CheckerMode::SelfCheck => Faithfulness::FaithfulSelf,
            _ => Faithfulness::FaithfulExternal,
        },
        Some(false) => Faithfulness::Unfaithful,
        None => Faithfulness::Undecided,
    })
}

/// Identifies one candidate's translation job.
#[derive(Debug, Clone, Copy)]
pub struct TranslationRequest<'a> {
    pub problem_id: &'a str,
    pub candidate_index: usize,
    pub question: &'a str,
    pub answer: &'a str,
}

/// Compose render → chat → parse → optional faithfulness check.
///
/// Translator-side problems (render preconditions, backend exhaustion, parse
/// failures) come back as a *failed* [`Translation`] — terminal, excluded
/// from verified sets but never from plain majority vote. Judge backend
/// failures propagate as errors so the check stays retryable.
pub fn translate(
    translator: &Client,
    req: &TranslationRequest<'_>,
    mode: TranslationMode,
    judge: Option<(&Client, CheckerMode)>,
) -> Result<Translation, BackendError> {
    if req.answer.trim().is_empty() {
        return Ok(Translation::failed(
            req,
            mode,
            FormalizeError::EmptyAnswer.to_string(),
        ));
    }
    let statement = nl_statement(req.question, req.answer);
    translate_statement(translator, req, &statement, mode, judge)
}

/// [`translate`] over a pre-composed proof-problem statement: the aligned
/// flow rewrites (question, answer) first and hands the result here. The
/// faithfulness judge still sees the *original* question and answer from the
/// request, so alignment drift is caught rather than laundered.
pub fn translate_statement(
    translator: &Client,
    req: &TranslationRequest<'_>,
    nl: &str,
    mode: TranslationMode,
    judge: Option<(&Client, CheckerMode)>,
) -> Result<Translation, BackendError> {
    let prompt = render_statement_prompt(req.problem_id, nl, mode);
    let completions = match translator.chat(&prompt) {
        Ok(c) => c,
        Err(e) => {
            return Ok(Translation::failed(
                req,
                mode,
                format!("translator backend: {e}"),
            ))
        }
    };
    let completion = &completions[0];
    let cot = match mode {
        TranslationMode::LongCot => Some(completion.clone()),
        TranslationMode::FewShot => None,
    };
    let statement = match parse_lean_statement(completion, mode) {
        Ok(s) => s,
        Err(e) => {
            let mut t = Translation::failed(req, mode, e.to_string());
            t.cot = cot;
            return Ok(t);
        }
    };
    let faithfulness = match judge {
        Some((judge_client, checker)) if checker != CheckerMode::Off => {
            check_faithfulness(judge_client, req.question, req.answer, &statement, checker)?
        }
        _ => Faithfulness::Unchecked,
    };
    Ok(Translation {
        problem_id: req.problem_id.to_string(),
        candidate_index: req.candidate_index,
        statement: Some(statement),
        failure: None,
        cot,
        mode,
        faithfulness,
    })
}
