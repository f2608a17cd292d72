//! Prompt templates: the detection question and the three reasoning prompts.

use serde::{Deserialize, Serialize};

use crate::corpus::VulnPair;

pub const DETECTION_SYSTEM_PROMPT: &str = "You are a security expert that is good at static program analysis.";

/// Detection user prompt; `{func}` is replaced by the code under analysis.
pub const DETECTION_USER_TEMPLATE: &str = "Please analyze the following code:
```
{func}
```
Please indicate your analysis result with one of the options:
(1) YES: A security vulnerability detected.
(2) NO: No security vulnerability.
Make sure to include one of the options above \"explicitly\" (EXPLICITLY!!!) in your response.
Let's think step-by-step.";

pub const CODE_PLACEHOLDER: &str = "{func}";

/// The detection question `Q`: a system prompt and a user template with a
/// `{func}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub system: String,
    pub user: String,
}

impl Default for QuestionTemplate {
    fn default() -> Self {
        Self { system: DETECTION_SYSTEM_PROMPT.into(), user: DETECTION_USER_TEMPLATE.into() }
    }
}

impl QuestionTemplate {
    pub fn render_user(&self, code: &str) -> String {
        self.user.replace(CODE_PLACEHOLDER, code.trim_end_matches('\n'))
    }

    /// System and user prompt joined into a single conditioning text.
    pub fn render(&self, code: &str) -> String {
        format!("{}\n{}", self.system, self.render_user(code))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningDirection {
    /// Why the pre-code is vulnerable.
    Forward,
    /// Why the post-code no longer is.
    Backward,
    /// What the code-diff changes.
    Diff,
}

impl ReasoningDirection {
    pub const ALL: [ReasoningDirection; 3] = [Self::Forward, Self::Backward, Self::Diff];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Backward => "backward",
            Self::Diff => "diff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

/// Marker line leading every reasoning prompt.
pub const DIRECTION_MARKER: &str = "Reasoning direction: ";

pub(crate) fn fenced(label: &str, body: &str) -> String {
    format!("{label}:\n```\n{}\n```\n", body.trim_end_matches('\n'))
}

/// Vulnerability information lines; empty when the pair carries none.
pub(crate) fn metadata_section(pair: &VulnPair) -> String {
    if !pair.has_metadata() {
        return String::new();
    }
    let mut s = String::from("Vulnerability information:\n");
    let fields = [
        ("CVE-ID", &pair.cve_id),
        ("CWE-ID", &pair.cwe_id),
        ("CVE description", &pair.cve_description),
        ("Commit message", &pair.commit_message),
    ];
    for (name, value) in fields {
        if let Some(v) = value {
            s.push_str(&format!("{name}: {}\n", v.trim()));
        }
    }
    s.push('\n');
    s
}

pub(crate) const FORWARD_TASK: &str = "The target code below is vulnerable; the code diff shows the patch that fixes it. \
Deduce the cause that triggers the vulnerability in the target code: locate the vulnerable line, trace the control flow \
and data flow that reach it, and interpret the root cause.";

pub(crate) const BACKWARD_TASK: &str = "The target code below is the fixed version; the code diff shows the patch that \
produced it. Explain why the code changes prevent the recurrence of the vulnerability and outline the steps taken to \
rectify it: locate the fixing lines, trace the control flow and data flow through them, and interpret why the \
vulnerability no longer triggers.";

pub(crate) const DIFF_TASK: &str = "The code diff below is a security patch. Explain the vulnerability-specific change: \
locate the lines it touches, trace how the control flow and data flow change, and interpret the root cause it removes.";

pub(crate) fn answer_format(verdict: &str) -> String {
    format!(
        "Answer in exactly this format:\n{verdict}\nReason:\n[Interpretation]:\n\
1. <the line(s) involved and where they are>\n\
2. <the control flow and data flow path through those lines>\n\
3. <the root cause: First, ... Then, ... Finally, ...>\n"
    )
}
