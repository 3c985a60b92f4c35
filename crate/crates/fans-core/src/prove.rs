//! Proof generation: render the proof-completion prompt for a translated
//! statement, sample k continuations from the prover endpoint, and
//! reconstruct standalone Lean4 files (fixed header + statement + body).
//!
//! Reconstructed sources are self-contained by construction: model-emitted
//! `import` lines are stripped (the fixed header is authoritative) and each
//! source holds exactly one theorem declaration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, ChatMessage, Client};
use crate::formalize::Translation;

/// Fixed header of every proof file the prover completes.
pub const LEAN_FILE_HEADER: &str = "import Mathlib\nimport Aesop\n\nset_option maxHeartbeats 0\n\nopen BigOperators Real Nat Topology Rat";

/// One reconstructed standalone proof file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofAttempt {
    pub problem_id: String,
    pub candidate_index: usize,
    /// Dense 0..m-1 within one translation.
    pub attempt_index: usize,
    /// Complete Lean4 file: header + statement + proof body.
    pub source: String,
    pub prover_model: String,
}

/// What one prover round produced, with bookkeeping for the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProveOutcome {
    pub attempts: Vec<ProofAttempt>,
    /// Completions requested (k).
    pub requested: usize,
    /// Completions that parsed into a well-formed source.
    pub parsed: usize,
    /// Parsed completions dropped as byte-identical duplicates.
    pub deduplicated: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProveError {
    #[error("empty statement")]
    EmptyStatement,
    #[error("empty proof body")]
    EmptyBody,
    #[error("restated theorem without a proof body")]
    NoProofBody,
    #[error("proof contains a placeholder tactic (sorry/admit)")]
    Placeholder,
    #[error("more than one theorem declaration")]
    MultipleTheorems,
}

/// Content-address of one source file (used for dedup and verdict caching).
pub fn source_hash(source: &str) -> String {
    let mut h = Sha256::new();
    h.update(source.as_bytes());
    crate::backends::hex(&h.finalize())
}

/// The statement with a guaranteed trailing ":= by" for the prover to
/// continue (existing "by" suffixes, however spaced, are left untouched).
pub fn ensure_by_suffix(statement: &str) -> String {
    let trimmed = statement.trim_end();
    let ends_with_by = regex::Regex::new(r":=\s*by$")
        .expect("static regex")
        .is_match(trimmed);
    if ends_with_by {
        trimmed.to_string()
    } else if trimmed.ends_with(":=") {
        format!("{trimmed} by")
    } else {
        format!("{trimmed} := by")
    }
}

/// Render the proof-completion prompt: instruction line, an open lean4 fence,
/// the fixed header, then the statement ending at ":= by".
pub fn render_proof_prompt(statement: &str) -> Result<Vec<ChatMessage>, ProveError> {
    if statement.trim().is_empty() {
        return Err(ProveError::EmptyStatement);
    }
    let content = format!(
        "Complete the following Lean 4 code with explanatory comments preceding each line of code:\n\n```lean4\n{LEAN_FILE_HEADER}\n\n{}",
        ensure_by_suffix(statement)
    );
    Ok(vec![ChatMessage::user(content)])
}

/// Reconstruct a standalone file from one prover completion.
///
/// The completion may be a bare continuation of the prompt's open fence, a
/// fenced full file (restating header and statement), or a continuation with
/// a closing fence plus trailing prose. Restated declarations are collapsed
/// onto the known statement; model `import` lines are dropped; placeholder
/// tactics are rejected.
pub fn parse_proof(completion: &str, statement: &str) -> Result<String, ProveError> {
    if statement.trim().is_empty() {
        return Err(ProveError::EmptyStatement);
    }
    // Isolate the code region: inside an explicit ```lean4 fence if the
    // completion leads with one, otherwise everything before the first fence.
    let lean_fence = completion.find("```lean4");
    let any_fence = completion.find("```");
    let code: &str = match (lean_fence, any_fence) {
        (Some(lf), Some(af)) if lf == af => {
            let after = &completion[lf + "```lean4".len()..];
            match after.find("```") {
                Some(end) => &after[..end],
                None => after,
            }
        }
        (_, Some(af)) => &completion[..af],
        (_, None) => completion,
    };
    // The fixed header is authoritative: drop model-emitted import lines.
    let code: String = code
        .lines()
        .filter(|line| !line.trim_start().starts_with("import "))
        .collect::<Vec<_>>()
        .join("\n");
    let theorem_decl = regex::Regex::new(r"(?m)^\s*(theorem|lemma)\b").expect("static regex");
    let by_token = regex::Regex::new(r":=\s*by\b").expect("static regex");
    let body: &str = if theorem_decl.is_match(&code) {
        // Restated declaration: the real body starts after its ":= by".
        match by_token.find(&code) {
            Some(m) => &code[m.end()..],
            None => return Err(ProveError::NoProofBody),
        }
    } else {
        &code
    };
    let body = body.trim_end();
    if body.trim().is_empty() {
        return Err(ProveError::EmptyBody);
    }
    if theorem_decl.is_match(body) {
        return Err(ProveError::MultipleTheorems);
    }
    let statement = ensure_by_suffix(statement);
    let separator = if body.starts_with(|c: char| c.is_whitespace()) {
        ""
    } else {
        " "
    };
    let source = format!("{LEAN_FILE_HEADER}\n\n{statement}{separator}{body}\n");
    let placeholder = regex::Regex::new(r"\b(sorry|admit)\b").expect("static regex");
    if placeholder.is_match(&source) {
        return Err(ProveError::Placeholder);
    }
    Ok(source)
}

/// Sample k proof completions for one successful translation and keep every
/// parseable, deduplicated reconstruction (possibly none), with dense attempt
/// indices.
pub fn prove(
    prover: &Client,
    translation: &Translation,
    k: u32,
) -> Result<ProveOutcome, BackendError> {
    if k == 0 {
        return Err(BackendError::InvalidRequest(
            "k proof attempts must be >= 1".into(),
        ));
    }
    let Some(statement) = translation.statement.as_deref() else {
        return Err(BackendError::InvalidRequest(format!(
            "translation for {} candidate {} failed; nothing to prove",
            translation.problem_id, translation.candidate_index
        )));
    };
    let prompt = render_proof_prompt(statement).map_err(|e| {
        BackendError::InvalidRequest(format!("unprovable statement: {e}"))
    })?;
    let mut sampling = prover.config().sampling.clone();
    sampling.n_samples = k;
    let completions = prover.chat_with(&prompt, &sampling)?;
    let mut attempts = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut parsed = 0usize;
    for completion in &completions {
        let Ok(source) = parse_proof(completion, statement) else {
            continue;
        };
        parsed += 1;
        if !seen.insert(source_hash(&source)) {
            continue;
        }
        attempts.push(ProofAttempt {
            problem_id: translation.problem_id.clone(),
            candidate_index: translation.candidate_index,
            attempt_index: attempts.len(),
            source,
            prover_model: prover.config().model_name.clone(),
        });
    }
    Ok(ProveOutcome {
        deduplicated: parsed - attempts.len(),
        requested: completions.len(),
        parsed,
        attempts,
    })
}
