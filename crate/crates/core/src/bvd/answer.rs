//! Structure of a reasoning answer: one verdict line, a `Reason:` header, an
//! `[Interpretation]:` marker and three numbered items.

use serde::{Deserialize, Serialize};

use super::prompts::ReasoningDirection;
use crate::eval::{explicit_verdicts, Label, NO_OPTION, YES_OPTION};
use crate::genclient::DEFAULT_MAX_NEW_TOKENS;
use crate::toymodel::count_tokens;

pub const INTERPRETATION_MARKER: &str = "[Interpretation]";
pub const ITEM_COUNT: usize = 3;

/// Verdict a direction's answer must carry. A patch diff exists because the
/// pre-code was vulnerable, so diff answers carry YES.
pub fn expected_label(direction: ReasoningDirection) -> Label {
    match direction {
        ReasoningDirection::Forward | ReasoningDirection::Diff => Label::Yes,
        ReasoningDirection::Backward => Label::No,
    }
}

pub fn option_text(label: Label) -> &'static str {
    match label {
        Label::No => NO_OPTION,
        _ => YES_OPTION,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub verdicts: Vec<Label>,
    pub has_interpretation: bool,
    /// Items 1..=3; `None` when missing or blank.
    pub items: [Option<String>; ITEM_COUNT],
}

fn item_start(line: &str) -> Option<(usize, &str)> {
    let t = line.trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = t[digits..].strip_prefix('.')?;
    let n: usize = t[..digits].parse().ok()?;
    Some((n, rest.trim()))
}

pub fn parse_answer(text: &str) -> ParsedAnswer {
    let verdicts = explicit_verdicts(text).into_iter().map(|(l, _)| l).collect();
    let mut items: [Option<String>; ITEM_COUNT] = Default::default();
    let Some(pos) = text.find(INTERPRETATION_MARKER) else {
        return ParsedAnswer { verdicts, has_interpretation: false, items };
    };
    let body = &text[pos + INTERPRETATION_MARKER.len()..];
    let mut current: Option<usize> = None;
    let mut buf: Vec<String> = vec![String::new(); ITEM_COUNT];
    for line in body.lines().skip(1) {
        match item_start(line) {
            Some((n, rest)) if (1..=ITEM_COUNT).contains(&n) && buf[n - 1].is_empty() => {
                current = Some(n - 1);
                buf[n - 1].push_str(rest);
            }
            _ => {
                if let Some(i) = current {
                    let l = line.trim();
                    if !l.is_empty() {
                        if !buf[i].is_empty() {
                            buf[i].push(' ');
                        }
                        buf[i].push_str(l);
                    }
                }
            }
        }
    }
    for (slot, b) in items.iter_mut().zip(buf) {
        if !b.trim().is_empty() {
            *slot = Some(b);
        }
    }
    ParsedAnswer { verdicts, has_interpretation: true, items }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ValidationFailure {
    Empty,
    OverBudget { tokens: usize, limit: usize },
    MissingVerdict,
    MultipleVerdicts { count: usize },
    VerdictMismatch { expected: Label, found: Label },
    MissingInterpretation,
    MissingItem { item: usize },
}

impl ValidationFailure {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Empty => "empty",
            Self::OverBudget { .. } => "over_budget",
            Self::MissingVerdict => "missing_verdict",
            Self::MultipleVerdicts { .. } => "multiple_verdicts",
            Self::VerdictMismatch { .. } => "verdict_mismatch",
            Self::MissingInterpretation => "missing_interpretation",
            Self::MissingItem { .. } => "missing_items",
        }
    }
}

/// All problems with `text` as an answer for `direction`; empty when valid.
pub fn validate_answer_with_budget(text: &str, direction: ReasoningDirection, max_tokens: usize) -> Vec<ValidationFailure> {
    if text.trim().is_empty() {
        return vec![ValidationFailure::Empty];
    }
    let mut failures = Vec::new();
    let tokens = count_tokens(text);
    if tokens > max_tokens {
        failures.push(ValidationFailure::OverBudget { tokens, limit: max_tokens });
    }
    let parsed = parse_answer(text);
    match parsed.verdicts.as_slice() {
        [] => failures.push(ValidationFailure::MissingVerdict),
        [found] => {
            let expected = expected_label(direction);
            if *found != expected {
                failures.push(ValidationFailure::VerdictMismatch { expected, found: *found });
            }
        }
        many => failures.push(ValidationFailure::MultipleVerdicts { count: many.len() }),
    }
    if !parsed.has_interpretation {
        failures.push(ValidationFailure::MissingInterpretation);
    } else {
        for (i, item) in parsed.items.iter().enumerate() {
            if item.is_none() {
                failures.push(ValidationFailure::MissingItem { item: i + 1 });
            }
        }
    }
    failures
}

pub fn validate_answer(text: &str, direction: ReasoningDirection) -> Vec<ValidationFailure> {
    validate_answer_with_budget(text, direction, DEFAULT_MAX_NEW_TOKENS)
}

/// The verdict line, the headers and item `k` (1-based) of a valid answer.
pub fn answer_slice(text: &str, k: usize) -> Option<String> {
    let parsed = parse_answer(text);
    let label = *parsed.verdicts.last()?;
    let item = parsed.items.get(k.checked_sub(1)?)?.as_ref()?;
    Some(format!("{}\nReason:\n{INTERPRETATION_MARKER}:\n{k}. {item}", option_text(label)))
}
