use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::toymodel::split_words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Yes,
    No,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "YES",
            Label::No => "NO",
            Label::Unknown => "UNKNOWN",
        }
    }

    /// The correct label for a snippet with the given ground truth.
    pub fn for_truth(vulnerable: bool) -> Self {
        if vulnerable {
            Label::Yes
        } else {
            Label::No
        }
    }
}

/// A parsed detection verdict. `source_span` is a character range into the
/// parsed text and is present only for YES/NO.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub source_span: Option<Range<usize>>,
}

impl Verdict {
    pub fn unknown() -> Self {
        Self { label: Label::Unknown, source_span: None }
    }
}

pub const YES_OPTION: &str = "YES: A security vulnerability detected.";
pub const NO_OPTION: &str = "NO: No security vulnerability.";

const YES_PATTERN: &str = "yes a security vulnerability detected";
const NO_PATTERN: &str = "no no security vulnerability";

/// Lowercased alphanumeric text with single spaces, plus the source char
/// index of every normalized char.
fn normalize(text: &str) -> (String, Vec<usize>) {
    let mut norm = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(text.len());
    let mut pending_space = false;
    for (ci, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            if pending_space && !norm.is_empty() {
                norm.push(' ');
                map.push(ci);
            }
            pending_space = false;
            for lc in c.to_lowercase() {
                norm.push(lc);
                map.push(ci);
            }
        } else {
            pending_space = true;
        }
    }
    (norm, map)
}

fn find_pattern(norm: &str, map: &[usize], pattern: &str, label: Label, out: &mut Vec<(Label, Range<usize>)>) {
    // char offsets: normalized text is built from chars, so index by chars
    let chars: Vec<char> = norm.chars().collect();
    let pat: Vec<char> = pattern.chars().collect();
    let mut i = 0;
    while i + pat.len() <= chars.len() {
        let at_start = i == 0 || chars[i - 1] == ' ';
        let end = i + pat.len();
        let at_end = end == chars.len() || chars[end] == ' ';
        if at_start && at_end && chars[i..end] == pat[..] {
            out.push((label, map[i]..map[end - 1] + 1));
            i = end;
        } else {
            i += 1;
        }
    }
}

/// Every explicit option occurrence, ordered by position. Matching is
/// case-insensitive and ignores punctuation and spacing.
pub fn explicit_verdicts(text: &str) -> Vec<(Label, Range<usize>)> {
    let (norm, map) = normalize(text);
    let mut found = Vec::new();
    find_pattern(&norm, &map, YES_PATTERN, Label::Yes, &mut found);
    find_pattern(&norm, &map, NO_PATTERN, Label::No, &mut found);
    found.sort_by_key(|(_, r)| r.start);
    found
}

fn bare_verdicts(text: &str) -> Vec<(Label, Range<usize>)> {
    let mut found = Vec::new();
    let base = text.as_ptr() as usize;
    for w in split_words(text) {
        let label = match w {
            "YES" => Label::Yes,
            "NO" => Label::No,
            _ => continue,
        };
        let byte = w.as_ptr() as usize - base;
        let start = text[..byte].chars().count();
        found.push((label, start..start + w.chars().count()));
    }
    found
}

/// Detection verdict of a model answer.
///
/// The last explicit option occurrence wins. Without one, the last bare
/// upper-case `YES`/`NO` word is used; otherwise the verdict is UNKNOWN.
pub fn parse_prediction(text: &str) -> Verdict {
    let pick = |mut v: Vec<(Label, Range<usize>)>| v.pop().map(|(label, span)| Verdict { label, source_span: Some(span) });
    pick(explicit_verdicts(text))
        .or_else(|| pick(bare_verdicts(text)))
        .unwrap_or_else(Verdict::unknown)
}
