//! Unified diffs between pre-code and post-code, and a small patch applier
//! used to check that a diff reproduces the post-code.

use std::fmt::Write as _;

use similar::{ChangeTag, TextDiff};
use thiserror::Error;

/// Number of unchanged lines kept around each hunk.
pub const CONTEXT_LINES: usize = 3;

/// Unified diff (3 context lines) turning `pre_code` into `post_code`.
///
/// Identical inputs produce an empty string.
pub fn compute_code_diff(pre_code: &str, post_code: &str) -> String {
    if pre_code == post_code {
        return String::new();
    }
    // similar's ops can carry wrong cross-side indices (e.g. the new index
    // of a deletion), so line numbers come from counting the change stream
    let diff = TextDiff::from_lines(pre_code, post_code);
    let changes: Vec<(ChangeTag, &str)> = diff.iter_all_changes().map(|c| (c.tag(), c.value())).collect();
    let mut positions = Vec::with_capacity(changes.len());
    let (mut old_no, mut new_no) = (0, 0);
    for (tag, _) in &changes {
        positions.push((old_no, new_no));
        match tag {
            ChangeTag::Equal => (old_no, new_no) = (old_no + 1, new_no + 1),
            ChangeTag::Delete => old_no += 1,
            ChangeTag::Insert => new_no += 1,
        }
    }
    let edits: Vec<usize> = (0..changes.len()).filter(|&i| changes[i].0 != ChangeTag::Equal).collect();
    let mut out = String::from("--- pre\n+++ post\n");
    let mut k = 0;
    while k < edits.len() {
        // extend the hunk while the gap to the next edit fits in both contexts
        let mut last = k;
        while last + 1 < edits.len() && edits[last + 1] - edits[last] - 1 <= 2 * CONTEXT_LINES {
            last += 1;
        }
        let from = edits[k].saturating_sub(CONTEXT_LINES);
        let to = (edits[last] + CONTEXT_LINES + 1).min(changes.len());
        let span = &changes[from..to];
        let count = |t: ChangeTag| span.iter().filter(|(tag, _)| *tag == t || *tag == ChangeTag::Equal).count();
        let (old_start, new_start) = positions[from];
        let _ = writeln!(
            out,
            "@@ -{} +{} @@",
            hunk_range(old_start, count(ChangeTag::Delete)),
            hunk_range(new_start, count(ChangeTag::Insert))
        );
        for (tag, text) in span {
            out.push(match tag {
                ChangeTag::Equal => ' ',
                ChangeTag::Delete => '-',
                ChangeTag::Insert => '+',
            });
            out.push_str(text);
            if !text.ends_with('\n') {
                out.push_str("\n\\ No newline at end of file\n");
            }
        }
        k = last + 1;
    }
    out
}

fn hunk_range(start: usize, len: usize) -> String {
    match len {
        0 => format!("{start},0"),
        1 => format!("{}", start + 1),
        n => format!("{},{n}", start + 1),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("line {line}: malformed hunk header `{header}`")]
    BadHeader { line: usize, header: String },
    #[error("line {line}: unexpected diff line `{text}`")]
    BadLine { line: usize, text: String },
    #[error("hunk at diff line {line} does not match the original at line {original_line}")]
    Mismatch { line: usize, original_line: usize },
    #[error("hunk at diff line {line} starts before the end of the previous hunk")]
    Overlap { line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Line<'a> {
    text: &'a str,
    newline: bool,
}

fn split_lines(text: &str) -> Vec<Line<'_>> {
    text.split_inclusive('\n')
        .map(|l| match l.strip_suffix('\n') {
            Some(t) => Line { text: t, newline: true },
            None => Line { text: l, newline: false },
        })
        .collect()
}

#[derive(Debug)]
enum HunkLine<'a> {
    Context(Line<'a>),
    Remove(Line<'a>),
    Add(Line<'a>),
}

impl<'a> HunkLine<'a> {
    fn line_mut(&mut self) -> &mut Line<'a> {
        match self {
            HunkLine::Context(l) | HunkLine::Remove(l) | HunkLine::Add(l) => l,
        }
    }
}

struct Hunk<'a> {
    header_line: usize,
    old_start: usize,
    old_len: usize,
    lines: Vec<HunkLine<'a>>,
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    let s = &s[1..];
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_header(text: &str) -> Option<(usize, usize)> {
    let inner = text.strip_prefix("@@ ")?;
    let end = inner.find(" @@")?;
    let mut parts = inner[..end].split_whitespace();
    let old = parts.next().filter(|p| p.starts_with('-'))?;
    let new = parts.next().filter(|p| p.starts_with('+'))?;
    parse_range(new)?;
    parse_range(old)
}

fn parse_hunks(diff: &str) -> Result<Vec<Hunk<'_>>, PatchError> {
    let mut hunks: Vec<Hunk<'_>> = Vec::new();
    for (idx, line) in split_lines(diff).into_iter().enumerate() {
        let lineno = idx + 1;
        let text = line.text;
        if text.starts_with("@@") {
            let (old_start, old_len) = parse_header(text).ok_or_else(|| PatchError::BadHeader {
                line: lineno,
                header: text.to_string(),
            })?;
            hunks.push(Hunk { header_line: lineno, old_start, old_len, lines: Vec::new() });
            continue;
        }
        let Some(hunk) = hunks.last_mut() else {
            // file headers and anything else before the first hunk
            continue;
        };
        let content = Line { text: text.get(1..).unwrap_or(""), newline: line.newline };
        match text.chars().next() {
            Some(' ') => hunk.lines.push(HunkLine::Context(content)),
            Some('-') => hunk.lines.push(HunkLine::Remove(content)),
            Some('+') => hunk.lines.push(HunkLine::Add(content)),
            Some('\\') => match hunk.lines.last_mut() {
                Some(prev) => prev.line_mut().newline = false,
                None => return Err(PatchError::BadLine { line: lineno, text: text.to_string() }),
            },
            // blank context lines are sometimes emitted without the leading space
            None => hunk.lines.push(HunkLine::Context(Line { text: "", newline: line.newline })),
            _ => return Err(PatchError::BadLine { line: lineno, text: text.to_string() }),
        }
    }
    Ok(hunks)
}

/// Apply a unified diff to `original`, returning the patched text.
///
/// Context and removed lines must match exactly, including the presence of a
/// trailing newline. An empty diff returns the original unchanged.
pub fn apply_unified_diff(original: &str, diff: &str) -> Result<String, PatchError> {
    let source = split_lines(original);
    let hunks = parse_hunks(diff)?;
    let mut out = String::with_capacity(original.len());
    let push = |out: &mut String, line: &Line<'_>| {
        out.push_str(line.text);
        if line.newline {
            out.push('\n');
        }
    };
    let mut cursor = 0usize;
    for hunk in &hunks {
        // a zero-length old range names the line *after* which to insert
        let start = if hunk.old_len == 0 { hunk.old_start } else { hunk.old_start.saturating_sub(1) };
        if start < cursor || start > source.len() {
            return Err(PatchError::Overlap { line: hunk.header_line });
        }
        for line in &source[cursor..start] {
            push(&mut out, line);
        }
        cursor = start;
        for hl in &hunk.lines {
            match hl {
                HunkLine::Context(l) | HunkLine::Remove(l) => {
                    if source.get(cursor) != Some(l) {
                        return Err(PatchError::Mismatch {
                            line: hunk.header_line,
                            original_line: cursor + 1,
                        });
                    }
                    if let HunkLine::Context(l) = hl {
                        push(&mut out, l);
                    }
                    cursor += 1;
                }
                HunkLine::Add(l) => push(&mut out, l),
            }
        }
    }
    for line in &source[cursor..] {
        push(&mut out, line);
    }
    Ok(out)
}
