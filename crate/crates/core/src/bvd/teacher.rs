//! Offline teacher: answers reasoning prompts from the patch itself.

use super::prompts::{ReasoningDirection, DIRECTION_MARKER};
use crate::genclient::{BackendError, GenerationBackend, GenerationRequest, GenerationResult};

/// Deterministic stand-in for the teacher model. It reads the direction,
/// code diff and CWE out of a reasoning prompt and writes a well-formed
/// answer naming the changed lines.
#[derive(Debug, Default, Clone, Copy)]
pub struct TemplateTeacher;

#[derive(Debug, Default, Clone, PartialEq, Eq)]
struct PatchFacts {
    /// `(old line number, text)`
    removed: Vec<(usize, String)>,
    /// `(new line number, text)`
    added: Vec<(usize, String)>,
    /// First unchanged line after the first change, `(old line number, text)`.
    guarded: Option<(usize, String)>,
}

fn hunk_starts(header: &str) -> Option<(usize, usize)> {
    let mut parts = header.split_whitespace().skip(1);
    let start = |s: &str| s[1..].split(',').next()?.parse::<usize>().ok();
    Some((start(parts.next()?)?, start(parts.next()?)?))
}

fn patch_facts(diff: &str) -> PatchFacts {
    let mut facts = PatchFacts::default();
    let (mut old, mut new) = (0usize, 0usize);
    let mut changed = false;
    for line in diff.lines() {
        if line.starts_with("@@") {
            if let Some((o, n)) = hunk_starts(line) {
                (old, new) = (o, n);
            }
            continue;
        }
        if line.starts_with("---") || line.starts_with("+++") || line.starts_with('\\') {
            continue;
        }
        match line.chars().next() {
            Some('-') => {
                facts.removed.push((old, line[1..].trim().to_string()));
                old += 1;
                changed = true;
            }
            Some('+') => {
                facts.added.push((new, line[1..].trim().to_string()));
                new += 1;
                changed = true;
            }
            _ => {
                let text = line.get(1..).unwrap_or("").trim();
                if changed && facts.guarded.is_none() && !text.is_empty() && text != "}" {
                    facts.guarded = Some((old, text.to_string()));
                }
                old += 1;
                new += 1;
            }
        }
    }
    facts
}

fn fenced_block<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let start = prompt.find(&format!("{label}:\n```\n"))? + label.len() + 6;
    let len = prompt[start..].find("\n```")?;
    Some(&prompt[start..start + len])
}

fn field<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(name)).map(str::trim)
}

fn lesson(cwe: Option<&str>) -> (&'static str, &'static str) {
    match cwe.map(|c| c.to_ascii_uppercase()) {
        Some(c) if c == "CWE-369" => ("a zero divisor", "checking divisors before division"),
        Some(c) if c == "CWE-476" => ("a null pointer", "checking pointers before dereference"),
        Some(c) if ["CWE-787", "CWE-125", "CWE-119", "CWE-120"].contains(&c.as_str()) => {
            ("an out of range index", "checking bounds before memory access")
        }
        Some(c) if c == "CWE-190" => ("an overflowing size", "checking arithmetic before allocation"),
        Some(c) if c == "CWE-416" => ("a freed object", "clearing references after release"),
        _ => ("unvalidated input", "validating input before use"),
    }
}

fn first(lines: &[(usize, String)]) -> Option<(usize, &str)> {
    lines.first().map(|(n, t)| (*n, t.as_str()))
}

fn compose(direction: ReasoningDirection, facts: &PatchFacts, cwe: Option<&str>) -> String {
    let (hazard, lesson) = lesson(cwe);
    let weakness = cwe.unwrap_or("the weakness");
    let sink = first(&facts.removed).or(facts.guarded.as_ref().map(|(n, t)| (*n, t.as_str())));
    let (sink_line, sink) = sink.unwrap_or((1, "the changed statement"));
    let fix = first(&facts.added);
    let items = match direction {
        ReasoningDirection::Forward => {
            let missing = fix.map(|(_, t)| format!("without the check `{t}`")).unwrap_or_else(|| "directly".into());
            [
                format!("The vulnerability in the target code arises in line {sink_line}: `{sink}`."),
                format!("Specifically, the control flow reaches line {sink_line} {missing}, and the data flow carries {hazard} into `{sink}`."),
                format!(
                    "First, the input reaches `{sink}` unchecked. Then, {hazard} triggers {weakness}. \
Finally, this target code highlights the importance of {lesson}."
                ),
            ]
        }
        ReasoningDirection::Backward => {
            let (fix_line, fix) = fix.unwrap_or((sink_line, "the removal of the unsafe statement"));
            [
                format!("The fixed code in the target code arises in line {fix_line}: `{fix}`."),
                format!("Specifically, line {fix_line} runs before `{sink}`, so the control flow only reaches it after the check and the data flow cannot carry {hazard}."),
                format!(
                    "First, the fix adds `{fix}`. Then, the unsafe path to `{sink}` is cut. \
Finally, the vulnerability does not trigger because the code now applies {lesson}."
                ),
            ]
        }
        ReasoningDirection::Diff => {
            let change = match (fix, first(&facts.removed)) {
                (Some((_, a)), Some((_, r))) => format!("replaces `{r}` with `{a}`"),
                (Some((_, a)), None) => format!("adds `{a}` before `{sink}`"),
                (None, Some((_, r))) => format!("removes `{r}`"),
                (None, None) => "changes no lines".to_string(),
            };
            [
                format!("The code diff changes the code around line {sink_line}: it {change}."),
                format!("Specifically, before the patch the control flow reaches `{sink}` with {hazard}; after it the data flow is checked first."),
                format!(
                    "First, the original code trusts its input at `{sink}`. Then, the patch {change}. \
Finally, the change removes {weakness} by {lesson}."
                ),
            ]
        }
    };
    let verdict = super::answer::option_text(super::answer::expected_label(direction));
    format!("{verdict}\nReason:\n[Interpretation]:\n1. {}\n2. {}\n3. {}\n", items[0], items[1], items[2])
}

/// The answer the teacher gives to `user_prompt`, if it is a reasoning prompt.
pub fn teacher_answer(user_prompt: &str) -> Option<String> {
    let direction = ReasoningDirection::parse(field(user_prompt, DIRECTION_MARKER)?)?;
    let diff = fenced_block(user_prompt, "Code diff").unwrap_or("");
    let cwe = field(user_prompt, "CWE-ID:");
    Some(compose(direction, &patch_facts(diff), cwe))
}

impl GenerationBackend for TemplateTeacher {
    fn name(&self) -> &str {
        "teacher"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        teacher_answer(&request.user_prompt)
            .map(GenerationResult::stop)
            .ok_or_else(|| BackendError::InvalidRequest("not a reasoning prompt".into()))
    }
}
