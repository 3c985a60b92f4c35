//! Answer-selection policies: plain majority vote, verified majority vote
//! with a threshold fallback, reward-model best-of-N, the combined policy,
//! and the verified-set cleanup transform used for upper-bound analysis.
//!
//! All policies are pure, deterministic functions; every tie-break is a total
//! order over candidate indices.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mathtext::{equivalent, group_by_equivalence, normalize, CanonicalAnswer};

/// The selection policies a run can enable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Majority vote over all extracted answers.
    Mv,
    /// Majority vote over verified answers, falling back below threshold.
    Fans,
    /// Highest reward-model score.
    Orm,
    /// Highest reward-model score among verified answers, falling back to
    /// plain best-of-N.
    OrmFans,
    /// Verified majority vote after demoting wrong-but-verified candidates
    /// (gold-aware analysis policy).
    FansRemove,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Mv => "mv",
            Policy::Fans => "fans",
            Policy::Orm => "orm",
            Policy::OrmFans => "orm_fans",
            Policy::FansRemove => "fans_remove",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a policy needs to choose one candidate for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInput {
    pub problem_id: String,
    /// (candidate index, extracted answer if any). Candidates without an
    /// extracted answer never join a vote group or a verified set.
    pub candidates: Vec<(usize, Option<CanonicalAnswer>)>,
    /// Candidate index → passed verification.
    pub verifications: BTreeMap<usize, bool>,
    /// Candidate index → reward score (required by the score policies).
    pub scores: Option<BTreeMap<usize, f64>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("no candidates for problem {problem_id}")]
    Empty { problem_id: String },
    #[error("duplicate candidate index {index}")]
    DuplicateIndex { index: usize },
    #[error("{kind} key {index} is not a candidate index")]
    UnknownIndex { kind: &'static str, index: usize },
    #[error("missing reward score for candidate {index}")]
    MissingScore { index: usize },
    #[error("non-finite reward score for candidate {index}")]
    NonFiniteScore { index: usize },
}

impl SelectionInput {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.candidates.is_empty() {
            return Err(SelectError::Empty {
                problem_id: self.problem_id.clone(),
            });
        }
        let mut seen = BTreeSet::new();
        for (index, _) in &self.candidates {
            if !seen.insert(*index) {
                return Err(SelectError::DuplicateIndex { index: *index });
            }
        }
        for index in self.verifications.keys() {
            if !seen.contains(index) {
                return Err(SelectError::UnknownIndex {
                    kind: "verification",
                    index: *index,
                });
            }
        }
        if let Some(scores) = &self.scores {
            for (index, score) in scores {
                if !seen.contains(index) {
                    return Err(SelectError::UnknownIndex {
                        kind: "score",
                        index: *index,
                    });
                }
                if !score.is_finite() {
                    return Err(SelectError::NonFiniteScore { index: *index });
                }
            }
        }
        Ok(())
    }

    /// Indices that are verified AND carry an extracted answer.
    fn verified_set(&self) -> BTreeSet<usize> {
        self.candidates
            .iter()
            .filter(|(index, answer)| {
                answer.is_some() && self.verifications.get(index).copied().unwrap_or(false)
            })
            .map(|(index, _)| *index)
            .collect()
    }

    fn lowest_index(&self) -> usize {
        self.candidates
            .iter()
            .map(|(index, _)| *index)
            .min()
            .expect("validated nonempty")
    }
}

/// Minimum winning vote count for the verified majority to stand on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub min_votes: usize,
}

impl Default for Threshold {
    /// A verified singleton is exactly the false-positive shape the fallback
    /// exists to guard against, so the default demands at least two votes.
    fn default() -> Self {
        Threshold { min_votes: 2 }
    }
}

/// The outcome of one policy on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub policy: Policy,
    pub chosen_index: usize,
    pub chosen_answer: CanonicalAnswer,
    pub votes: Option<usize>,
    pub score: Option<f64>,
    pub used_fallback: bool,
    pub verified_winner: bool,
    /// True when every candidate lacked an extracted answer and the result is
    /// a placeholder (lowest index, empty answer).
    pub degenerate: bool,
}

/// Run a vote over the candidates whose index passes `allowed` (and that have
/// an answer); returns (chosen index, answer, votes) or None if nothing is
/// votable.
fn vote(
    input: &SelectionInput,
    allowed: Option<&BTreeSet<usize>>,
) -> Option<(usize, CanonicalAnswer, usize)> {
    let mut voters: Vec<(usize, &CanonicalAnswer)> = input
        .candidates
        .iter()
        .filter_map(|(index, answer)| answer.as_ref().map(|a| (*index, a)))
        .filter(|(index, _)| allowed.is_none_or(|set| set.contains(index)))
        .collect();
    if voters.is_empty() {
        return None;
    }
    // Ascending candidate index so group representatives (first-seen
    // positions) coincide with lowest candidate indices.
    voters.sort_by_key(|(index, _)| *index);
    let answers: Vec<CanonicalAnswer> = voters.iter().map(|(_, a)| (*a).clone()).collect();
    let groups = group_by_equivalence(&answers);
    let winner = groups.first().expect("nonempty voters produce groups");
    let (chosen_index, answer) = voters[winner.representative];
    Some((chosen_index, answer.clone(), winner.count()))
}

fn degenerate_result(input: &SelectionInput, policy: Policy) -> SelectionResult {
    SelectionResult {
        policy,
        chosen_index: input.lowest_index(),
        chosen_answer: normalize(""),
        votes: None,
        score: None,
        used_fallback: false,
        verified_winner: false,
        degenerate: true,
    }
}

/// Most frequent answer under equivalence; ties go to the lowest candidate
/// index. Candidates without an extracted answer are excluded; if that leaves
/// nobody, the result is a flagged placeholder.
pub fn majority_vote(input: &SelectionInput) -> Result<SelectionResult, SelectError> {
    input.validate()?;
    Ok(match vote(input, None) {
        Some((chosen_index, chosen_answer, votes)) => SelectionResult {
            policy: Policy::Mv,
            chosen_index,
            chosen_answer,
            votes: Some(votes),
            score: None,
            used_fallback: false,
            verified_winner: false,
            degenerate: false,
        },
        None => degenerate_result(input, Policy::Mv),
    })
}

/// Verified majority vote: vote over verified candidates first; keep that
/// winner only if it has at least `t.min_votes` votes, otherwise fall back to
/// the vote over all candidates.
pub fn fans_select(input: &SelectionInput, t: Threshold) -> Result<SelectionResult, SelectError> {
    input.validate()?;
    let verified = input.verified_set();
    if !verified.is_empty() {
        let (chosen_index, chosen_answer, votes) =
            vote(input, Some(&verified)).expect("verified candidates always carry answers");
        if votes >= t.min_votes {
            return Ok(SelectionResult {
                policy: Policy::Fans,
                chosen_index,
                chosen_answer,
                votes: Some(votes),
                score: None,
                used_fallback: false,
                verified_winner: true,
                degenerate: false,
            });
        }
    }
    Ok(match vote(input, None) {
        Some((chosen_index, chosen_answer, votes)) => SelectionResult {
            policy: Policy::Fans,
            chosen_index,
            chosen_answer,
            votes: Some(votes),
            score: None,
            used_fallback: true,
            verified_winner: false,
            degenerate: false,
        },
        None => degenerate_result(input, Policy::Fans),
    })
}

/// Argmax over a set of candidate indices; requires a score for each member.
/// Ties keep the lowest index (iteration ascends, replacement is strict).
fn argmax_score(
    input: &SelectionInput,
    members: &BTreeSet<usize>,
) -> Result<(usize, f64), SelectError> {
    let scores = input.scores.as_ref().expect("checked by caller");
    let mut best: Option<(usize, f64)> = None;
    for index in members {
        let score = *scores
            .get(index)
            .ok_or(SelectError::MissingScore { index: *index })?;
        match best {
            Some((_, best_score)) if score <= best_score => {}
            _ => best = Some((*index, score)),
        }
    }
    best.ok_or(SelectError::Empty {
        problem_id: input.problem_id.clone(),
    })
}

fn require_scores(input: &SelectionInput) -> Result<(), SelectError> {
    let scores = input.scores.as_ref().ok_or(SelectError::MissingScore {
        index: input.lowest_index(),
    })?;
    for (index, _) in &input.candidates {
        if !scores.contains_key(index) {
            return Err(SelectError::MissingScore { index: *index });
        }
    }
    Ok(())
}

fn answer_of(input: &SelectionInput, index: usize) -> CanonicalAnswer {
    input
        .candidates
        .iter()
        .find(|(i, _)| *i == index)
        .and_then(|(_, a)| a.clone())
        .unwrap_or_else(|| normalize(""))
}

/// Best-of-N by reward score over answered candidates.
pub fn orm_select(input: &SelectionInput) -> Result<SelectionResult, SelectError> {
    input.validate()?;
    require_scores(input)?;
    let answered: BTreeSet<usize> = input
        .candidates
        .iter()
        .filter(|(_, answer)| answer.is_some())
        .map(|(index, _)| *index)
        .collect();
    if answered.is_empty() {
        return Ok(degenerate_result(input, Policy::Orm));
    }
    let (chosen_index, score) = argmax_score(input, &answered)?;
    Ok(SelectionResult {
        policy: Policy::Orm,
        chosen_index,
        chosen_answer: answer_of(input, chosen_index),
        votes: None,
        score: Some(score),
        used_fallback: false,
        verified_winner: false,
        degenerate: false,
    })
}

/// Best-of-N restricted to verified candidates; with nobody verified, the
/// result is plain best-of-N flagged as a fallback.
pub fn orm_fans_select(input: &SelectionInput) -> Result<SelectionResult, SelectError> {
    input.validate()?;
    require_scores(input)?;
    let verified = input.verified_set();
    if !verified.is_empty() {
        let (chosen_index, score) = argmax_score(input, &verified)?;
        return Ok(SelectionResult {
            policy: Policy::OrmFans,
            chosen_index,
            chosen_answer: answer_of(input, chosen_index),
            votes: None,
            score: Some(score),
            used_fallback: false,
            verified_winner: true,
            degenerate: false,
        });
    }
    let mut result = orm_select(input)?;
    result.policy = Policy::OrmFans;
    if !result.degenerate {
        result.used_fallback = true;
    }
    Ok(result)
}

/// Demote every verified candidate whose answer is not equivalent to gold
/// (or missing). A candidate equivalent to gold is never demoted.
pub fn fans_remove(input: &SelectionInput, gold: &CanonicalAnswer) -> SelectionInput {
    let mut out = input.clone();
    for (index, answer) in &out.candidates {
        let keeps_verification = answer.as_ref().is_some_and(|a| equivalent(a, gold));
        if !keeps_verification {
            if let Some(v) = out.verifications.get_mut(index) {
                *v = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input(answers: &[Option<&str>]) -> SelectionInput {
        SelectionInput {
            problem_id: "p".into(),
            candidates: answers
                .iter()
                .enumerate()
                .map(|(i, a)| (i, a.map(normalize)))
                .collect(),
            verifications: BTreeMap::new(),
            scores: None,
        }
    }

    fn with_verified(mut input: SelectionInput, verified: &[usize]) -> SelectionInput {
        for (index, _) in &input.candidates {
            input
                .verifications
                .insert(*index, verified.contains(index));
        }
        input
    }

    fn with_scores(mut input: SelectionInput, scores: &[f64]) -> SelectionInput {
        input.scores = Some(scores.iter().copied().enumerate().collect());
        input
    }

    #[test]
    fn unanimity_takes_all_votes() {
        let r = majority_vote(&input(&[Some("5"); 8])).unwrap();
        assert_eq!(r.chosen_answer.text, "5");
        assert_eq!(r.votes, Some(8));
        assert!(!r.used_fallback && !r.degenerate);
    }

    #[test]
    fn plurality_wins() {
        let r = majority_vote(&input(&[
            Some("a"),
            Some("a"),
            Some("b"),
            Some("b"),
            Some("b"),
        ]))
        .unwrap();
        assert_eq!(r.chosen_answer.text, "b");
        assert_eq!(r.votes, Some(3));
        assert_eq!(r.chosen_index, 2);
    }

    #[test]
    fn ties_break_to_the_lowest_index() {
        let r = majority_vote(&input(&[Some("a"), Some("b")])).unwrap();
        assert_eq!(r.chosen_index, 0);
        assert_eq!(r.chosen_answer.text, "a");
    }

    #[test]
    fn votes_group_by_equivalence_not_text() {
        let r = majority_vote(&input(&[Some("0.5"), Some("\\frac{1}{2}"), Some("7")])).unwrap();
        assert_eq!(r.chosen_index, 0);
        assert_eq!(r.votes, Some(2));
    }

    #[test]
    fn unextracted_candidates_do_not_vote() {
        let r = majority_vote(&input(&[None, Some("7"), Some("7")])).unwrap();
        assert_eq!(r.chosen_index, 1);
        assert_eq!(r.votes, Some(2));
    }

    #[test]
    fn all_unextracted_is_a_flagged_placeholder() {
        let r = majority_vote(&input(&[None, None, None])).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.chosen_index, 0);
        assert_eq!(r.chosen_answer.text, "");
        assert_eq!(r.votes, None);
    }

    #[test]
    fn verified_majority_stands_at_threshold() {
        // Verified answers {a,a,b}; the other five all say c.
        let base = input(&[
            Some("a"),
            Some("a"),
            Some("b"),
            Some("c"),
            Some("c"),
            Some("c"),
            Some("c"),
            Some("c"),
        ]);
        let r = fans_select(&with_verified(base, &[0, 1, 2]), Threshold { min_votes: 2 }).unwrap();
        assert_eq!(r.chosen_answer.text, "a");
        assert_eq!(r.votes, Some(2));
        assert!(r.verified_winner && !r.used_fallback);
    }

    #[test]
    fn empty_verified_set_falls_back_to_plain_vote() {
        let base = input(&[Some("x"), Some("y"), Some("y")]);
        let fans = fans_select(&with_verified(base.clone(), &[]), Threshold::default()).unwrap();
        let mv = majority_vote(&base).unwrap();
        assert_eq!(fans.chosen_index, mv.chosen_index);
        assert_eq!(fans.chosen_answer, mv.chosen_answer);
        assert_eq!(fans.votes, mv.votes);
        assert!(fans.used_fallback && !fans.verified_winner);
    }

    #[test]
    fn below_threshold_verified_winner_is_discarded() {
        // Verified singleton b at index 1; full vote winner is c.
        let base = input(&[Some("b"), Some("b"), Some("c"), Some("c"), Some("c")]);
        let r = fans_select(&with_verified(base, &[0]), Threshold { min_votes: 2 }).unwrap();
        assert_eq!(r.chosen_answer.text, "c");
        assert!(r.used_fallback);
        assert_eq!(r.votes, Some(3));
    }

    #[test]
    fn threshold_zero_with_everyone_verified_matches_plain_vote() {
        let base = input(&[Some("a"), Some("b"), Some("b"), Some("c")]);
        let all: Vec<usize> = (0..4).collect();
        let fans =
            fans_select(&with_verified(base.clone(), &all), Threshold { min_votes: 0 }).unwrap();
        let mv = majority_vote(&base).unwrap();
        assert_eq!(fans.chosen_index, mv.chosen_index);
    }

    #[test]
    fn best_score_wins_and_ties_keep_lowest_index() {
        let r = orm_select(&with_scores(
            input(&[Some("a"), Some("b"), Some("c")]),
            &[0.1, 0.9, 0.3],
        ))
        .unwrap();
        assert_eq!(r.chosen_index, 1);
        assert_eq!(r.score, Some(0.9));

        let r = orm_select(&with_scores(
            input(&[Some("a"), Some("b"), Some("c")]),
            &[0.4, 0.4, 0.4],
        ))
        .unwrap();
        assert_eq!(r.chosen_index, 0);

        let r = orm_select(&with_scores(input(&[Some("only")]), &[0.2])).unwrap();
        assert_eq!(r.chosen_index, 0);
    }

    #[test]
    fn missing_scores_are_a_precondition_error() {
        let err = orm_select(&input(&[Some("a")])).unwrap_err();
        assert!(matches!(err, SelectError::MissingScore { .. }));
        let mut sparse = with_scores(input(&[Some("a"), Some("b")]), &[0.5]);
        sparse.scores.as_mut().unwrap().remove(&1);
        assert_eq!(
            orm_select(&sparse).unwrap_err(),
            SelectError::MissingScore { index: 1 }
        );
    }

    #[test]
    fn verified_argmax_ignores_higher_unverified_scores() {
        let base = with_scores(
            input(&[Some("a"), Some("b"), Some("c"), Some("d"), Some("e"), Some("f")]),
            &[0.99, 0.1, 0.5, 0.2, 0.3, 0.6],
        );
        let r = orm_fans_select(&with_verified(base, &[2, 5])).unwrap();
        assert_eq!(r.chosen_index, 5);
        assert_eq!(r.score, Some(0.6));
        assert!(r.verified_winner && !r.used_fallback);
    }

    #[test]
    fn score_fallback_matches_plain_best_of_n() {
        let base = with_scores(input(&[Some("a"), Some("b")]), &[0.3, 0.7]);
        let fallback = orm_fans_select(&with_verified(base.clone(), &[])).unwrap();
        let plain = orm_select(&base).unwrap();
        assert_eq!(fallback.chosen_index, plain.chosen_index);
        assert_eq!(fallback.score, plain.score);
        assert!(fallback.used_fallback);

        let everyone = orm_fans_select(&with_verified(base.clone(), &[0, 1])).unwrap();
        assert_eq!(everyone.chosen_index, plain.chosen_index);
    }

    #[test]
    fn cleanup_demotes_wrong_verified_candidates_only() {
        let gold = normalize("42");
        let base = with_verified(
            input(&[Some("42"), Some("41"), Some("0.5"), None]),
            &[0, 1, 3],
        );
        let cleaned = fans_remove(&base, &gold);
        assert!(cleaned.verifications[&0], "gold-equivalent stays");
        assert!(!cleaned.verifications[&1], "wrong answer demoted");
        assert!(!cleaned.verifications[&2], "was never verified");
        assert!(!cleaned.verifications[&3], "answerless demoted");
    }

    #[test]
    fn cleanup_is_a_fixpoint_when_all_verified_are_correct() {
        let gold = normalize("\\frac{1}{2}");
        let base = with_verified(input(&[Some("0.5"), Some("1/2"), Some("3")]), &[0, 1]);
        let cleaned = fans_remove(&base, &gold);
        assert_eq!(cleaned, base);
    }

    #[test]
    fn invariant_violations_are_reported() {
        let empty = SelectionInput {
            problem_id: "p".into(),
            candidates: vec![],
            verifications: BTreeMap::new(),
            scores: None,
        };
        assert!(matches!(
            majority_vote(&empty),
            Err(SelectError::Empty { .. })
        ));

        let mut dup = input(&[Some("a"), Some("b")]);
        dup.candidates[1].0 = 0;
        assert_eq!(
            majority_vote(&dup).unwrap_err(),
            SelectError::DuplicateIndex { index: 0 }
        );

        let mut stray = input(&[Some("a")]);
        stray.verifications.insert(7, true);
        assert_eq!(
            majority_vote(&stray).unwrap_err(),
            SelectError::UnknownIndex {
                kind: "verification",
                index: 7
            }
        );

        let bad = with_scores(input(&[Some("a")]), &[f64::NAN]);
        assert_eq!(
            orm_select(&bad).unwrap_err(),
            SelectError::NonFiniteScore { index: 0 }
        );
    }

    /// Arbitrary small selection inputs over a 4-answer alphabet.
    fn arb_input() -> impl Strategy<Value = SelectionInput> {
        (
            prop::collection::vec(
                (prop::option::of(0u8..4), any::<bool>(), 0u16..1000),
                1..10,
            ),
        )
            .prop_map(|(rows,)| {
                let candidates: Vec<(usize, Option<CanonicalAnswer>)> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, (a, _, _))| (i, a.map(|d| normalize(&d.to_string()))))
                    .collect();
                let verifications = rows
                    .iter()
                    .enumerate()
                    .map(|(i, (_, v, _))| (i, *v))
                    .collect();
                let scores = Some(
                    rows.iter()
                        .enumerate()
                        .map(|(i, (_, _, s))| (i, f64::from(*s) / 1000.0))
                        .collect(),
                );
                SelectionInput {
                    problem_id: "prop".into(),
                    candidates,
                    verifications,
                    scores,
                }
            })
    }

    proptest! {
        #[test]
        fn policies_are_deterministic_and_order_insensitive(input in arb_input()) {
            let mut shuffled = input.clone();
            shuffled.candidates.reverse();
            let t = Threshold::default();
            prop_assert_eq!(majority_vote(&input).unwrap(), majority_vote(&shuffled).unwrap());
            prop_assert_eq!(fans_select(&input, t).unwrap(), fans_select(&shuffled, t).unwrap());
            prop_assert_eq!(orm_select(&input).unwrap(), orm_select(&shuffled).unwrap());
            prop_assert_eq!(orm_fans_select(&input).unwrap(), orm_fans_select(&shuffled).unwrap());
        }

        #[test]
        fn verified_choices_come_from_the_verified_set(input in arb_input()) {
            let verified = input.verified_set();
            let fans = fans_select(&input, Threshold { min_votes: 1 }).unwrap();
            if fans.verified_winner {
                prop_assert!(verified.contains(&fans.chosen_index));
            }
            let of = orm_fans_select(&input).unwrap();
            if !verified.is_empty() {
                prop_assert!(verified.contains(&of.chosen_index));
            }
        }

        #[test]
        fn cleanup_never_demotes_gold_equivalent_candidates(input in arb_input()) {
            let gold = normalize("2");
            let cleaned = fans_remove(&input, &gold);
            for (index, answer) in &input.candidates {
                let was = input.verifications.get(index).copied().unwrap_or(false);
                let now = cleaned.verifications.get(index).copied().unwrap_or(false);
                if answer.as_ref().is_some_and(|a| equivalent(a, &gold)) {
                    prop_assert_eq!(was, now);
                } else {
                    prop_assert!(!now, "non-equivalent candidate {index} kept verification");
                }
            }
        }
    }
}
