//! Benchmark-only crate: deterministic input builders for the criterion
//! benches in `benches/hot_paths.rs`. Keeping the generators here keeps the
//! bench files focused on measurement.

use std::collections::BTreeMap;

use fans_core::mathtext::normalize;
use fans_core::select::SelectionInput;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Answer strings spanning the formats the normalizer is asked to handle.
pub const ANSWER_POOL: &[&str] = &[
    "42",
    "-5",
    "$\\frac{1}{2}$",
    "0.5",
    "\\left( 3, \\frac{\\pi}{2} \\right)",
    "2^{10}",
    "\\text{east}",
    "  216\\mbox{ inches}^2  ",
    "11\\sqrt{2}",
    "10\\%",
    "\\$20{,}000",
    "x+y",
];

/// Sampler-style completions for the answer-extraction bench.
pub fn synthetic_completions(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let answer = ANSWER_POOL[rng.gen_range(0..ANSWER_POOL.len())];
            format!(
                "Step {i}: expand the expression.\nStep {}: simplify.\n\
                 Therefore the final answer is $\\boxed{{{answer}}}$.",
                i + 1
            )
        })
        .collect()
}

/// Builds one selection input with `n` candidates drawn from a seeded pool of
/// answer shapes, so repeated benchmark runs see identical work. Roughly 40%
/// of candidates are verified and every candidate carries a reward score, so
/// the same input exercises every policy.
pub fn synthetic_input(seed: u64, n: usize) -> SelectionInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<(usize, _)> = (0..n)
        .map(|index| {
            let raw = ANSWER_POOL[rng.gen_range(0..ANSWER_POOL.len())];
            (index, Some(normalize(raw)))
        })
        .collect();
    let verifications: BTreeMap<usize, bool> =
        (0..n).map(|index| (index, rng.gen_bool(0.4))).collect();
    let scores: BTreeMap<usize, f64> =
        (0..n).map(|index| (index, rng.gen_range(0.0..1.0))).collect();
    SelectionInput {
        problem_id: format!("bench-{seed}"),
        candidates,
        verifications,
        scores: Some(scores),
    }
}
