//! Answer extraction, canonicalization, and equivalence grading for
//! model-written math solutions.
//!
//! The grading kernel is deliberately total: `normalize` never fails, it just
//! degrades to a text-only canonical form when the input is outside the small
//! numeric grammar (integers, decimals, fractions, tuples thereof).

use std::sync::OnceLock;

use num::{BigInt, BigRational, One, Signed, Zero};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where an answer was found in a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Boxed,
    AnswerIsPattern,
    None,
}

/// An answer lifted verbatim out of a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    /// Verbatim text, exactly the characters at `span`.
    pub raw: String,
    pub source: AnswerSource,
    /// Half-open character-offset range of `raw` within the completion.
    pub span: (usize, usize),
}

impl ExtractedAnswer {
    fn none() -> Self {
        ExtractedAnswer {
            raw: String::new(),
            source: AnswerSource::None,
            span: (0, 0),
        }
    }

    pub fn is_present(&self) -> bool {
        self.source != AnswerSource::None
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("unbalanced braces in \\boxed group starting at character offset {offset}")]
    UnbalancedBoxed { offset: usize },
}

fn char_offset(s: &str, byte_idx: usize) -> usize {
    s[..byte_idx].chars().count()
}

fn answer_is_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)the answer is:?").expect("static regex"))
}

/// Pull the final answer out of a completion.
///
/// Preference order: content of the last `\boxed{...}` group, then the math
/// payload on the line after the last "The answer is:" marker, then nothing.
/// An unbalanced `\boxed{` group is an error naming its character offset.
pub fn extract_answer(completion: &str) -> Result<ExtractedAnswer, ExtractError> {
    if let Some(b) = completion.rfind("\\boxed{") {
        let open = b + "\\boxed{".len();
        let mut depth = 1usize;
        for (i, ch) in completion[open..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        let (start, end) = (open, open + i);
                        return Ok(ExtractedAnswer {
                            raw: completion[start..end].to_string(),
                            source: AnswerSource::Boxed,
                            span: (char_offset(completion, start), char_offset(completion, end)),
                        });
                    }
                }
                _ => {}
            }
        }
        return Err(ExtractError::UnbalancedBoxed {
            offset: char_offset(completion, b),
        });
    }

    let Some(m) = answer_is_re().find_iter(completion).last() else {
        return Ok(ExtractedAnswer::none());
    };
    let mut start = m.end();
    let mut end = completion[start..]
        .find('\n')
        .map(|i| start + i)
        .unwrap_or(completion.len());

    // Shrink the payload: whitespace, a trailing period, and one enclosing
    // math-mode delimiter pair per round, until stable.
    loop {
        let before = (start, end);
        let seg = &completion[start..end];
        start += seg.len() - seg.trim_start().len();
        let seg = &completion[start..end];
        end -= seg.len() - seg.trim_end().len();
        let seg = &completion[start..end];
        if seg.ends_with('.') {
            end -= 1;
        }
        let seg = &completion[start..end];
        if seg.len() >= 2 && seg.starts_with('$') && seg.ends_with('$') {
            start += 1;
            end -= 1;
        } else if seg.len() >= 4 && seg.starts_with("\\(") && seg.ends_with("\\)") {
            start += 2;
            end -= 2;
        }
        if (start, end) == before {
            break;
        }
    }
    if start >= end {
        return Ok(ExtractedAnswer::none());
    }
    Ok(ExtractedAnswer {
        raw: completion[start..end].to_string(),
        source: AnswerSource::AnswerIsPattern,
        span: (char_offset(completion, start), char_offset(completion, end)),
    })
}

/// A normalized answer: canonical text, exact rational value when the text
/// falls inside the numeric grammar, and recursive parts for tuples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalAnswer {
    pub text: String,
    pub numeric: Option<BigRational>,
    pub parts: Option<Vec<CanonicalAnswer>>,
}

impl CanonicalAnswer {
    fn text_only(text: String) -> Self {
        CanonicalAnswer {
            text,
            numeric: None,
            parts: None,
        }
    }

    pub fn is_tuple(&self) -> bool {
        self.parts.is_some()
    }
}

/// Normalize raw answer text into its canonical form.
///
/// Strips enclosing `$`/`\(..\)`, `\left`/`\right`, whitespace, and trailing
/// periods; rewrites `\frac{a}{b}` to `(a)/(b)`, `\pi` to `pi`, `\cdot` to
/// `*`; resolves `\%` to a division by 100 when numeric; splits tuples on
/// top-level commas. Total and idempotent on its own output.
pub fn normalize(raw: &str) -> CanonicalAnswer {
    canonicalize(raw, 0)
}

const MAX_DEPTH: usize = 16;

fn canonicalize(raw: &str, depth: usize) -> CanonicalAnswer {
    if depth > MAX_DEPTH {
        return CanonicalAnswer::text_only(raw.trim().to_string());
    }
    let mut s = raw.trim().to_string();
    loop {
        let before = s.clone();
        s = s.trim().to_string();
        if s.len() >= 4 && s.starts_with("$$") && s.ends_with("$$") {
            s = s[2..s.len() - 2].to_string();
        } else if s.len() >= 2 && s.starts_with('$') && s.ends_with('$') {
            s = s[1..s.len() - 1].to_string();
        }
        if s.len() >= 4 && s.starts_with("\\(") && s.ends_with("\\)") {
            s = s[2..s.len() - 2].to_string();
        }
        while s.ends_with('.') {
            s.pop();
        }
        if s == before {
            break;
        }
    }
    s.retain(|c| !c.is_whitespace());
    s = s.replace("\\left", "").replace("\\right", "");
    s = rewrite_fracs(&s);
    s = s
        .replace("\\cdot", "*")
        .replace("\\pi", "pi")
        .replace('π', "pi")
        .replace('−', "-");
    structural(s, depth)
}

fn structural(s: String, depth: usize) -> CanonicalAnswer {
    if s.is_empty() {
        return CanonicalAnswer::text_only(s);
    }
    if let Some(base) = s.strip_suffix("\\%").or_else(|| s.strip_suffix('%')) {
        if let Some(v) = parse_numeric(base) {
            let v = v / BigRational::from_integer(BigInt::from(100));
            return CanonicalAnswer {
                text: rational_text(&v),
                numeric: Some(v),
                parts: None,
            };
        }
        return structural(base.to_string(), depth);
    }
    if wholly_wrapped(&s) {
        let inner = &s[1..s.len() - 1];
        let pieces = split_top_level(inner);
        if pieces.len() >= 2 {
            let parts: Vec<CanonicalAnswer> = pieces
                .into_iter()
                .map(|p| canonicalize(&p, depth + 1))
                .collect();
            let text = format!(
                "({})",
                parts
                    .iter()
                    .map(|p| p.text.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            return CanonicalAnswer {
                text,
                numeric: None,
                parts: Some(parts),
            };
        }
        // Redundant outer parentheses.
        return canonicalize(inner, depth + 1);
    }
    let s = slash_canonical(&s);
    let numeric = parse_numeric(&s);
    CanonicalAnswer {
        text: s,
        numeric,
        parts: None,
    }
}

/// True when the whole string is one `( ... )` group.
fn wholly_wrapped(s: &str) -> bool {
    if s.len() < 2 || !s.starts_with('(') || !s.ends_with(')') {
        return false;
    }
    let mut depth = 0i64;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
                if depth == 0 && i + 1 != s.len() {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i64;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' | '{' | '[' => depth += 1,
            ')' | '}' | ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur);
    out
}

/// Rewrite a single top-level `a/b` into the canonical `(a)/(b)` form.
fn slash_canonical(s: &str) -> String {
    let mut depth = 0i64;
    let mut slash = None;
    let mut count = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' | '{' | '[' => depth += 1,
            ')' | '}' | ']' => depth -= 1,
            '/' if depth == 0 => {
                slash = Some(i);
                count += 1;
            }
            _ => {}
        }
    }
    let (Some(i), 1) = (slash, count) else {
        return s.to_string();
    };
    let (a, b) = (&s[..i], &s[i + 1..]);
    // Only canonicalize clean fractions; a side with stray grouping
    // characters stays verbatim so canonicalization remains idempotent.
    let atomish = |x: &str| {
        !x.is_empty()
            && (wholly_wrapped(x)
                || !x.contains(['(', ')', '{', '}', '[', ']', ',', '/']))
    };
    if !atomish(a) || !atomish(b) {
        return s.to_string();
    }
    let wrap = |x: &str| {
        if wholly_wrapped(x) {
            x.to_string()
        } else {
            format!("({x})")
        }
    };
    format!("{}/{}", wrap(a), wrap(b))
}

/// Rewrite every `\frac{a}{b}` (and `\dfrac`/`\tfrac`/`\cfrac`) to `(a)/(b)`.
fn rewrite_fracs(s: &str) -> String {
    const CMDS: [&str; 4] = ["\\dfrac", "\\tfrac", "\\cfrac", "\\frac"];
    let found = CMDS
        .iter()
        .filter_map(|c| s.find(*c).map(|i| (i, *c)))
        .min_by_key(|(i, _)| *i);
    let Some((idx, cmd)) = found else {
        return s.to_string();
    };
    let head = &s[..idx];
    let rest = &s[idx + cmd.len()..];
    if let Some((a, rest1)) = parse_arg(rest) {
        if let Some((b, rest2)) = parse_arg(rest1) {
            return format!(
                "{head}({})/({}){}",
                rewrite_fracs(&a),
                rewrite_fracs(&b),
                rewrite_fracs(rest2)
            );
        }
    }
    // Arguments missing; keep the command literal and move past it.
    format!("{head}{cmd}{}", rewrite_fracs(rest))
}

/// One LaTeX macro argument: a brace group, a control word, or a single char.
fn parse_arg(s: &str) -> Option<(String, &str)> {
    let first = s.chars().next()?;
    if first == '{' {
        let mut depth = 1i64;
        for (i, c) in s.char_indices().skip(1) {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some((s[1..i].to_string(), &s[i + 1..]));
                    }
                }
                _ => {}
            }
        }
        None
    } else if first == '\\' {
        let end = s[1..]
            .find(|c: char| !c.is_ascii_alphabetic())
            .map(|i| i + 1)
            .unwrap_or(s.len());
        if end == 1 {
            None
        } else {
            Some((s[..end].to_string(), &s[end..]))
        }
    } else {
        let len = first.len_utf8();
        Some((s[..len].to_string(), &s[len..]))
    }
}

/// Exact numeric grammar: `sign? atom (/ sign? atom)?` where an atom is a
/// decimal literal or a parenthesized signed atom.
fn parse_numeric(s: &str) -> Option<BigRational> {
    let (n, rest) = parse_number(s)?;
    if rest.is_empty() {
        return Some(n);
    }
    let rest = rest.strip_prefix('/')?;
    let (d, rest) = parse_number(rest)?;
    if !rest.is_empty() || d.is_zero() {
        None
    } else {
        Some(n / d)
    }
}

fn parse_number(s: &str) -> Option<(BigRational, &str)> {
    let (neg, s) = if let Some(r) = s.strip_prefix('-') {
        (true, r)
    } else {
        (false, s.strip_prefix('+').unwrap_or(s))
    };
    let (v, rest) = if let Some(inner) = s.strip_prefix('(') {
        let (v, after) = parse_number(inner)?;
        (v, after.strip_prefix(')')?)
    } else {
        parse_decimal(s)?
    };
    Some((if neg { -v } else { v }, rest))
}

fn parse_decimal(s: &str) -> Option<(BigRational, &str)> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i;
    let mut end = i;
    let mut frac_digits = 0;
    if i < bytes.len() && bytes[i] == b'.' {
        let mut j = i + 1;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        frac_digits = j - (i + 1);
        if int_digits > 0 || frac_digits > 0 {
            end = j;
        }
    }
    if int_digits == 0 && frac_digits == 0 {
        return None;
    }
    let mut digits = s[..int_digits].to_string();
    if frac_digits > 0 {
        digits.push_str(&s[int_digits + 1..end]);
    }
    let numer = BigInt::parse_bytes(digits.as_bytes(), 10)?;
    let denom = BigInt::from(10u32).pow(frac_digits as u32);
    Some((BigRational::new(numer, denom), &s[end..]))
}

fn rational_text(v: &BigRational) -> String {
    if v.denom().is_one() {
        v.numer().to_string()
    } else {
        format!("({})/({})", v.numer(), v.denom())
    }
}

/// Decide whether two canonical answers denote the same value.
///
/// True when the texts match exactly, when both sides are numeric and equal
/// exactly or within 1e-9 relative tolerance, or when both are tuples of the
/// same arity whose parts are pairwise equivalent.
pub fn equivalent(a: &CanonicalAnswer, b: &CanonicalAnswer) -> bool {
    if a.text == b.text {
        return true;
    }
    match (&a.parts, &b.parts) {
        (Some(x), Some(y)) => {
            return x.len() == y.len() && x.iter().zip(y).all(|(p, q)| equivalent(p, q));
        }
        (Some(_), None) | (None, Some(_)) => return false,
        (None, None) => {}
    }
    match (&a.numeric, &b.numeric) {
        (Some(p), Some(q)) => p == q || rel_close(p, q),
        _ => false,
    }
}

fn rel_close(p: &BigRational, q: &BigRational) -> bool {
    let diff = (p - q).abs();
    let scale = p.abs().max(q.abs());
    let eps = BigRational::new(BigInt::one(), BigInt::from(1_000_000_000u64));
    diff <= eps * scale
}

/// One equivalence class over a candidate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerGroup {
    /// Lowest member index; the group's tie-break identity.
    pub representative: usize,
    /// All member indices, ascending.
    pub members: Vec<usize>,
}

impl AnswerGroup {
    pub fn count(&self) -> usize {
        self.members.len()
    }
}

/// Partition answers into equivalence groups (transitive closure), ordered by
/// descending size then ascending representative index.
pub fn group_by_equivalence(answers: &[CanonicalAnswer]) -> Vec<AnswerGroup> {
    let n = answers.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if equivalent(&answers[i], &answers[j]) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        by_root.entry(r).or_default().push(i);
    }
    let mut groups: Vec<AnswerGroup> = by_root
        .into_values()
        .map(|members| AnswerGroup {
            representative: members[0],
            members,
        })
        .collect();
    groups.sort_by(|a, b| {
        b.count()
            .cmp(&a.count())
            .then(a.representative.cmp(&b.representative))
    });
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn canon(s: &str) -> CanonicalAnswer {
        normalize(s)
    }

    #[test]
    fn extracts_last_boxed_group() {
        let e = extract_answer("Thus \\boxed{7} is wrong, so \\boxed{-5}.").unwrap();
        assert_eq!(e.raw, "-5");
        assert_eq!(e.source, AnswerSource::Boxed);
    }

    #[test]
    fn extracts_boxed_with_nested_braces() {
        let e = extract_answer("so \\boxed{\\frac{1}{2}} done").unwrap();
        assert_eq!(e.raw, "\\frac{1}{2}");
    }

    #[test]
    fn extracts_answer_is_payload() {
        let e = extract_answer("... The answer is: $(3,\\frac{\\pi}{2})$").unwrap();
        assert_eq!(e.raw, "(3,\\frac{\\pi}{2})");
        assert_eq!(e.source, AnswerSource::AnswerIsPattern);
    }

    #[test]
    fn no_conclusion_yields_none() {
        let e = extract_answer("no conclusion reached").unwrap();
        assert_eq!(e.source, AnswerSource::None);
        assert_eq!(e.raw, "");
        assert_eq!(e.span, (0, 0));
    }

    #[test]
    fn unbalanced_boxed_is_an_error_naming_the_offset() {
        let completion = "ok \\boxed{1 + (2";
        let err = extract_answer(completion).unwrap_err();
        assert_eq!(err, ExtractError::UnbalancedBoxed { offset: 3 });
    }

    #[test]
    fn spans_are_character_offsets() {
        let completion = "π² ≈ 9.87, and \\boxed{216}.";
        let e = extract_answer(completion).unwrap();
        assert_eq!(e.raw, "216");
        let by_chars: String = completion
            .chars()
            .skip(e.span.0)
            .take(e.span.1 - e.span.0)
            .collect();
        assert_eq!(by_chars, e.raw);
    }

    #[test]
    fn answer_is_marker_takes_the_last_occurrence() {
        let e = extract_answer("The answer is: 3\nWait. The answer is: 5.").unwrap();
        assert_eq!(e.raw, "5");
    }

    #[test]
    fn normalizes_plain_integers() {
        let c = canon(" 216. ");
        assert_eq!(c.text, "216");
        assert_eq!(c.numeric, Some(BigRational::from_integer(216.into())));
        assert!(c.parts.is_none());
    }

    #[test]
    fn normalizes_fractions_to_parenthesized_form() {
        let c = canon("\\frac{\\pi}{2}");
        assert_eq!(c.text, "(pi)/(2)");
        assert!(c.numeric.is_none());
        // Bare-slash spelling lands on the same canonical text.
        assert_eq!(canon("pi/2").text, "(pi)/(2)");
    }

    #[test]
    fn decimal_and_fraction_share_a_numeric_value() {
        let half = BigRational::new(1.into(), 2.into());
        assert_eq!(canon("0.50").numeric, Some(half.clone()));
        assert_eq!(canon("1/2").numeric, Some(half.clone()));
        assert_eq!(canon("50\\%").numeric, Some(half));
    }

    #[test]
    fn percent_of_non_numeric_base_just_drops_the_sign() {
        assert_eq!(canon("x\\%").text, "x");
    }

    #[test]
    fn tuples_split_on_top_level_commas() {
        let c = canon("$(3, \\frac{\\pi}{2})$");
        assert_eq!(c.text, "(3,(pi)/(2))");
        let parts = c.parts.as_ref().unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].text, "3");
        assert_eq!(parts[1].text, "(pi)/(2)");
    }

    #[test]
    fn left_right_wrappers_are_stripped() {
        let c = canon("\\left(1, 2\\right)");
        assert_eq!(c.text, "(1,2)");
        assert!(c.is_tuple());
    }

    #[test]
    fn nested_tuples_keep_structure() {
        let c = canon("(1,(2,3))");
        let parts = c.parts.as_ref().unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts[1].is_tuple());
    }

    #[test]
    fn cdot_becomes_star() {
        assert_eq!(canon("2\\cdot3").text, "2*3");
    }

    #[test]
    fn redundant_outer_parens_are_dropped() {
        assert_eq!(canon("(5)").text, "5");
        assert_eq!(canon("((5))").text, "5");
    }

    #[test]
    fn equivalence_examples() {
        assert!(equivalent(&canon("1/2"), &canon("0.5")));
        assert!(equivalent(&canon("(3, pi/2)"), &canon("(3,\\frac{\\pi}{2})")));
        assert!(equivalent(&canon("216."), &canon("216")));
        assert!(equivalent(&canon("-5"), &canon("$-5$")));
        assert!(!equivalent(&canon("7"), &canon("5")));
        assert!(!equivalent(&canon("(1,2)"), &canon("(1,2,3)")));
        assert!(!equivalent(&canon("(1,2)"), &canon("3")));
        assert!(!equivalent(&canon("x+1"), &canon("1+x")));
    }

    #[test]
    fn tolerance_is_relative_at_1e9() {
        assert!(equivalent(&canon("0.3333333333333333"), &canon("1/3")));
        assert!(!equivalent(&canon("0.333"), &canon("1/3")));
        assert!(!equivalent(&canon("0"), &canon("0.000000001")));
        assert!(equivalent(&canon("0"), &canon("0.0")));
    }

    #[test]
    fn grouping_orders_by_count_then_representative() {
        let answers: Vec<CanonicalAnswer> =
            ["1/2", "0.5", "3"].iter().map(|s| canon(s)).collect();
        let groups = group_by_equivalence(&answers);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec![0, 1]);
        assert_eq!(groups[0].representative, 0);
        assert_eq!(groups[1].members, vec![2]);
    }

    #[test]
    fn grouping_breaks_ties_by_lowest_representative() {
        let answers: Vec<CanonicalAnswer> = ["b", "a", "b", "a"].iter().map(|s| canon(s)).collect();
        let groups = group_by_equivalence(&answers);
        assert_eq!(groups[0].representative, 0);
        assert_eq!(groups[0].members, vec![0, 2]);
        assert_eq!(groups[1].members, vec![1, 3]);
    }

    #[test]
    fn grouping_empty_input() {
        assert!(group_by_equivalence(&[]).is_empty());
    }

    // A balanced-brace string strategy for the extraction roundtrip property.
    fn balanced() -> impl Strategy<Value = String> {
        let leaf = "[a-z0-9+*/^ .,-]{0,8}";
        leaf.prop_recursive(3, 24, 4, |inner| {
            (inner.clone(), inner).prop_map(|(a, b)| format!("{a}{{{b}}}"))
        })
    }

    proptest! {
        #[test]
        fn boxed_roundtrip(s in balanced()) {
            let completion = format!("text \\boxed{{{s}}}");
            let e = extract_answer(&completion).unwrap();
            prop_assert_eq!(e.raw, s);
        }

        #[test]
        fn normalize_is_idempotent_on_latexish(s in "[-0-9a-zXY(),{}/.$ ]{0,24}") {
            let once = normalize(&s);
            let twice = normalize(&once.text);
            prop_assert_eq!(&twice.text, &once.text);
            prop_assert_eq!(&twice.numeric, &once.numeric);
        }

        #[test]
        fn normalize_is_idempotent_on_frac_soup(
            a in "[0-9]{1,3}", b in "[0-9]{1,3}", wrap in 0usize..4
        ) {
            let raw = match wrap {
                0 => format!("\\frac{{{a}}}{{{b}}}"),
                1 => format!("$\\frac{{{a}}}{{{b}}}$"),
                2 => format!("({a}, \\frac{{{a}}}{{{b}}})"),
                _ => format!("{a}/{b}"),
            };
            let once = normalize(&raw);
            let twice = normalize(&once.text);
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn normalize_never_panics(s in "\\PC*") {
            let _ = normalize(&s);
        }

        #[test]
        fn extract_never_panics(s in "\\PC*") {
            let _ = extract_answer(&s);
        }

        #[test]
        fn groups_partition_the_input(
            xs in proptest::collection::vec("[0-9]{1,2}(/[1-9])?", 0..24)
        ) {
            let answers: Vec<CanonicalAnswer> = xs.iter().map(|s| normalize(s)).collect();
            let groups = group_by_equivalence(&answers);
            let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.members.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..answers.len()).collect::<Vec<_>>());
            for g in &groups {
                prop_assert_eq!(g.representative, g.members[0]);
            }
        }

        #[test]
        fn equivalence_is_symmetric(a in "[-0-9a-z(),/.]{0,12}", b in "[-0-9a-z(),/.]{0,12}") {
            let (ca, cb) = (normalize(&a), normalize(&b));
            prop_assert_eq!(equivalent(&ca, &cb), equivalent(&cb, &ca));
        }
    }
}
