//! Core library for a verification-aware math answer-selection pipeline:
//! sample candidate solutions from an LLM, autoformalize (question, answer)
//! pairs into Lean4 statements, prove and verify them against a Lean server,
//! then select final answers with verification-aware policies.

pub mod backends;
pub mod config;
pub mod corpus;
pub mod evalkit;
pub mod formalize;
pub mod mathtext;
pub mod pipeline;
pub mod prove;
pub mod select;
pub mod verify;
#[cfg(test)]
pub(crate) mod testutil;

pub use mathtext::{
    equivalent, extract_answer, group_by_equivalence, normalize, AnswerGroup, AnswerSource,
    CanonicalAnswer, ExtractedAnswer,
};
