//! Bidirectional reasoning synthesis: a teacher explains each patch pair
//! forward (why the pre-code is vulnerable), backward (why the post-code is
//! safe) and through its diff. Pairs whose three answers all validate form
//! the augmented training set.

mod answer;
mod prompts;
mod teacher;

pub use answer::{
    answer_slice, expected_label, option_text, parse_answer, validate_answer, validate_answer_with_budget,
    ParsedAnswer, ValidationFailure, INTERPRETATION_MARKER, ITEM_COUNT,
};
pub use prompts::{
    QuestionTemplate, ReasoningDirection, CODE_PLACEHOLDER, DETECTION_SYSTEM_PROMPT, DETECTION_USER_TEMPLATE,
    DIRECTION_MARKER,
};
pub use teacher::{teacher_answer, TemplateTeacher};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, VulnPair};
use crate::genclient::{
    generate_batch, BackendRegistry, GenerationBackend, GenerationRequest, RetryPolicy, DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_MAX_PROMPT_TOKENS, DEFAULT_PARALLELISM,
};

/// The reasoning prompt for one pair and direction, at temperature 0.
pub fn reasoning_request(pair: &VulnPair, direction: ReasoningDirection) -> GenerationRequest {
    let (task, target) = match direction {
        ReasoningDirection::Forward => (prompts::FORWARD_TASK, Some(&pair.pre_code)),
        ReasoningDirection::Backward => (prompts::BACKWARD_TASK, Some(&pair.post_code)),
        ReasoningDirection::Diff => (prompts::DIFF_TASK, None),
    };
    let mut user = format!("{DIRECTION_MARKER}{}\n{task}\n\n", direction.as_str());
    if let Some(code) = target {
        user.push_str(&prompts::fenced("Target code", code));
    }
    user.push_str(&prompts::fenced("Code diff", &pair.code_diff));
    user.push('\n');
    user.push_str(&prompts::metadata_section(pair));
    user.push_str(&prompts::answer_format(option_text(expected_label(direction))));
    GenerationRequest::new(DETECTION_SYSTEM_PROMPT, user)
}

/// One pair with its three validated answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedExample {
    pub pair_id: String,
    pub pre_code: String,
    pub pre_answer: String,
    pub post_code: String,
    pub post_answer: String,
    pub code_diff: String,
    pub diff_answer: String,
}

impl AugmentedExample {
    pub fn answer(&self, direction: ReasoningDirection) -> &str {
        match direction {
            ReasoningDirection::Forward => &self.pre_answer,
            ReasoningDirection::Backward => &self.post_answer,
            ReasoningDirection::Diff => &self.diff_answer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub parallelism: usize,
    /// Regenerations at temperature 1 allowed per answer after the first try.
    pub retry_budget: u32,
    pub retry: RetryPolicy,
    pub max_new_tokens: usize,
    pub max_prompt_tokens: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            parallelism: DEFAULT_PARALLELISM,
            retry_budget: 2,
            retry: RetryPolicy::default(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            max_prompt_tokens: DEFAULT_MAX_PROMPT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub pair_id: String,
    pub direction: ReasoningDirection,
    /// Failure codes of the last attempt, e.g. `verdict_mismatch` or `backend`.
    pub reasons: Vec<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub input_pairs: usize,
    pub retained_pairs: usize,
    pub dropped: Vec<DropRecord>,
    /// Temperature-1 regenerations issued per pair id.
    pub retries: BTreeMap<String, u32>,
    pub backend_errors: usize,
}

impl SynthesisReport {
    pub fn total_retries(&self) -> u32 {
        self.retries.values().sum()
    }
}

#[derive(Debug, Error)]
pub enum BvdError {
    #[error("no input pairs to synthesize from")]
    EmptyDataset,
    #[error("every pair failed synthesis ({} drops)", .0.dropped.len())]
    AllFailed(Box<SynthesisReport>),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed augmented example: {message}")]
    Malformed { line: usize, message: String },
}

struct Slot {
    answer: Option<String>,
    reasons: Vec<String>,
    detail: String,
}

/// Builds the augmented set. Each answer is generated at temperature 0; an
/// answer that fails validation or errors is regenerated at temperature 1 up
/// to `retry_budget` times. A pair is kept only when all three answers
/// validate; dropped answers are logged and reported.
pub fn synthesize_augmented(
    dataset: &Dataset,
    backend: &dyn GenerationBackend,
    options: &SynthesisOptions,
) -> Result<(Vec<AugmentedExample>, SynthesisReport), BvdError> {
    if dataset.is_empty() {
        return Err(BvdError::EmptyDataset);
    }
    let dirs = ReasoningDirection::ALL;
    let mut report = SynthesisReport { input_pairs: dataset.len(), ..Default::default() };
    let requests: Vec<GenerationRequest> = dataset
        .pairs
        .iter()
        .flat_map(|p| dirs.iter().map(move |&d| reasoning_request(p, d)))
        .map(|mut r| {
            r.max_new_tokens = options.max_new_tokens;
            r
        })
        .collect();
    let mut slots: Vec<Slot> =
        requests.iter().map(|_| Slot { answer: None, reasons: Vec::new(), detail: String::new() }).collect();

    let mut pending: Vec<usize> = Vec::new();
    for (i, req) in requests.iter().enumerate() {
        match req.validate(options.max_new_tokens, options.max_prompt_tokens) {
            Ok(()) => pending.push(i),
            Err(message) => {
                slots[i].reasons = vec!["invalid_request".into()];
                slots[i].detail = message;
            }
        }
    }

    for attempt in 0..=options.retry_budget {
        if pending.is_empty() {
            break;
        }
        let temperature = if attempt == 0 { 0.0 } else { 1.0 };
        let batch: Vec<GenerationRequest> =
            pending.iter().map(|&i| requests[i].clone().with_temperature(temperature)).collect();
        if attempt > 0 {
            for &i in &pending {
                *report.retries.entry(dataset.pairs[i / dirs.len()].id.clone()).or_default() += 1;
            }
        }
        let results = generate_batch(&batch, backend, options.parallelism, &options.retry);
        let mut still = Vec::new();
        for (&i, result) in pending.iter().zip(results) {
            let direction = dirs[i % dirs.len()];
            let slot = &mut slots[i];
            match result {
                Ok(r) => {
                    let failures = validate_answer_with_budget(&r.text, direction, options.max_new_tokens);
                    if failures.is_empty() {
                        slot.answer = Some(r.text);
                        continue;
                    }
                    slot.reasons = failures.iter().map(|f| f.code().to_string()).collect();
                    slot.reasons.dedup();
                    slot.detail = serde_json::to_string(&failures).unwrap_or_default();
                }
                Err(e) => {
                    report.backend_errors += 1;
                    slot.reasons = vec!["backend".into()];
                    slot.detail = e.to_string();
                }
            }
            still.push(i);
        }
        pending = still;
    }

    let mut examples = Vec::new();
    for (pi, pair) in dataset.pairs.iter().enumerate() {
        let group = &mut slots[pi * dirs.len()..(pi + 1) * dirs.len()];
        if group.iter().all(|s| s.answer.is_some()) {
            let mut answers = group.iter_mut().map(|s| s.answer.take().unwrap_or_default());
            let (pre_answer, post_answer, diff_answer) =
                (answers.next().unwrap_or_default(), answers.next().unwrap_or_default(), answers.next().unwrap_or_default());
            examples.push(AugmentedExample {
                pair_id: pair.id.clone(),
                pre_code: pair.pre_code.clone(),
                pre_answer,
                post_code: pair.post_code.clone(),
                post_answer,
                code_diff: pair.code_diff.clone(),
                diff_answer,
            });
            continue;
        }
        for (d, slot) in dirs.iter().zip(group.iter()) {
            if slot.answer.is_none() {
                log::warn!("dropping pair {} ({} answer): {}", pair.id, d.as_str(), slot.reasons.join(","));
                report.dropped.push(DropRecord {
                    pair_id: pair.id.clone(),
                    direction: *d,
                    reasons: slot.reasons.clone(),
                    detail: slot.detail.clone(),
                });
            }
        }
    }
    report.retained_pairs = examples.len();
    if examples.is_empty() {
        return Err(BvdError::AllFailed(Box::new(report)));
    }
    Ok((examples, report))
}

pub fn write_augmented(path: &Path, examples: &[AugmentedExample]) -> Result<(), BvdError> {
    let io = |source| BvdError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).expect("augmented example serializes");
        buf.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io)
}

pub fn parse_augmented(text: &str) -> Result<Vec<AugmentedExample>, BvdError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| BvdError::Malformed { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn load_augmented(path: &Path) -> Result<Vec<AugmentedExample>, BvdError> {
    let text = fs::read_to_string(path).map_err(|source| BvdError::Io { path: path.display().to_string(), source })?;
    parse_augmented(&text)
}

/// Adds the offline `teacher` backend.
pub fn register_backends(registry: &mut BackendRegistry) {
    registry.register("teacher", |_| Ok(Box::new(TemplateTeacher) as Box<dyn GenerationBackend>));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{compute_code_diff, SplitTag};
    use crate::genclient::{BackendError, FnBackend};

    fn pair(id: &str, with_meta: bool) -> VulnPair {
        let pre = format!("int {id}(char *p) {{\n  int n = 0;\n  n = p[0];\n  return n;\n}}\n");
        let post = format!("int {id}(char *p) {{\n  int n = 0;\n  if (!p) return -1;\n  n = p[0];\n  return n;\n}}\n");
        VulnPair {
            id: id.into(),
            code_diff: compute_code_diff(&pre, &post),
            pre_code: pre,
            post_code: post,
            cve_id: with_meta.then(|| "CVE-2020-0001".to_string()),
            cwe_id: with_meta.then(|| "CWE-476".to_string()),
            cve_description: None,
            commit_message: None,
            type_index: 0,
        }
    }

    fn dataset(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| pair(&format!("f{i}"), true)).collect(), SplitTag::Train)
    }

    fn fast() -> SynthesisOptions {
        SynthesisOptions { retry: RetryPolicy::immediate(), ..Default::default() }
    }

    #[test]
    fn prompts_carry_direction_specific_content() {
        let p = pair("g", true);
        let fwd = reasoning_request(&p, ReasoningDirection::Forward).user_prompt;
        let bwd = reasoning_request(&p, ReasoningDirection::Backward).user_prompt;
        let dif = reasoning_request(&p, ReasoningDirection::Diff).user_prompt;
        assert!(fwd.contains(p.pre_code.trim_end()) && !fwd.contains("if (!p) return -1;\n  n"));
        assert!(bwd.contains(p.post_code.trim_end()));
        assert!(!dif.contains("Target code"));
        for text in [&fwd, &bwd, &dif] {
            assert!(text.contains("CWE-ID: CWE-476"));
            assert!(!text.contains("CVE description"));
            assert!(text.contains("[Interpretation]"));
        }
        assert!(fwd.contains("YES: A security vulnerability detected."));
        assert!(bwd.contains("NO: No security vulnerability."));
    }

    #[test]
    fn metadata_section_omitted_without_metadata() {
        let p = pair("g", false);
        for d in ReasoningDirection::ALL {
            let text = reasoning_request(&p, d).user_prompt;
            assert!(!text.contains("Vulnerability information"));
            assert!(!text.contains("CWE-ID"));
        }
    }

    #[test]
    fn detection_question_renders_code() {
        let q = QuestionTemplate::default();
        let text = q.render("int x;\n");
        assert!(text.starts_with(DETECTION_SYSTEM_PROMPT));
        assert!(text.contains("```\nint x;\n```"));
        assert!(text.ends_with("Let's think step-by-step."));
    }

    #[test]
    fn teacher_keeps_every_pair() {
        let (examples, report) = synthesize_augmented(&dataset(5), &TemplateTeacher, &fast()).unwrap();
        assert_eq!(examples.len(), 5);
        assert_eq!(report.retained_pairs, 5);
        assert!(report.dropped.is_empty());
        assert_eq!(report.total_retries(), 0);
        for ex in &examples {
            assert!(validate_answer(&ex.pre_answer, ReasoningDirection::Forward).is_empty());
            assert!(validate_answer(&ex.post_answer, ReasoningDirection::Backward).is_empty());
            assert!(validate_answer(&ex.diff_answer, ReasoningDirection::Diff).is_empty());
        }
    }

    #[test]
    fn invalid_then_valid_counts_one_retry() {
        let backend = FnBackend::new(|req, _| {
            let ok = teacher_answer(&req.user_prompt).unwrap();
            if req.user_prompt.contains("int f1(") && req.temperature == 0.0 && req.user_prompt.contains("backward") {
                Ok("I think this is fine.".into())
            } else {
                Ok(ok)
            }
        });
        let (examples, report) = synthesize_augmented(&dataset(3), &backend, &fast()).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(report.retries.get("f1"), Some(&1));
        assert_eq!(report.total_retries(), 1);
    }

    #[test]
    fn persistent_mismatch_drops_pair() {
        let backend = FnBackend::new(|req, _| {
            let text = teacher_answer(&req.user_prompt).unwrap();
            if req.user_prompt.contains("int f0(") && req.user_prompt.starts_with("Reasoning direction: backward") {
                Ok(text.replace("NO: No security vulnerability.", "YES: A security vulnerability detected."))
            } else {
                Ok(text)
            }
        });
        let (examples, report) = synthesize_augmented(&dataset(2), &backend, &fast()).unwrap();
        assert_eq!(examples.iter().map(|e| e.pair_id.as_str()).collect::<Vec<_>>(), vec!["f1"]);
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].direction, ReasoningDirection::Backward);
        assert_eq!(report.dropped[0].reasons, vec!["verdict_mismatch"]);
        assert_eq!(report.retries.get("f0"), Some(&2));
    }

    #[test]
    fn all_failing_is_distinct_error() {
        let backend = FnBackend::new(|_, _| Err(BackendError::Status { code: 400, body: "bad".into() }));
        match synthesize_augmented(&dataset(2), &backend, &fast()) {
            Err(BvdError::AllFailed(report)) => {
                assert_eq!(report.dropped.len(), 6);
                assert!(report.backend_errors > 0);
            }
            other => panic!("expected AllFailed, got {other:?}"),
        }
        assert!(matches!(
            synthesize_augmented(&Dataset::new(vec![], SplitTag::Train), &TemplateTeacher, &fast()),
            Err(BvdError::EmptyDataset)
        ));
    }

    #[test]
    fn augmented_file_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        for path in [&a, &b] {
            let opts = SynthesisOptions { parallelism: 4, ..fast() };
            let (ex, _) = synthesize_augmented(&dataset(6), &TemplateTeacher, &opts).unwrap();
            write_augmented(path, &ex).unwrap();
        }
        let (ba, bb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(ba, bb);
        let first = String::from_utf8(ba).unwrap();
        let line = first.lines().next().unwrap();
        let keys: Vec<String> = serde_json::from_str::<serde_json::Value>(line)
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(keys.len(), 7);
        assert!(line.starts_with("{\"pair_id\":\"f0\",\"pre_code\":"));
        assert_eq!(load_augmented(&a).unwrap().len(), 6);
    }
}
