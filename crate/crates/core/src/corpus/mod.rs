//! Vulnerability patch corpora: loading, validation, type tagging and the
//! stratified evaluation split.

mod diff;

pub use diff::{apply_unified_diff, compute_code_diff, PatchError, CONTEXT_LINES};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the catch-all bucket for CWEs missing from the type mapping.
pub const OTHER_TYPE: &str = "other";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: record `{id}` rejected: {reason}")]
    Rejected { line: usize, id: String, reason: String },
    #[error("invalid type list: {0}")]
    TypeList(String),
    #[error("eval fraction {0} is outside (0, 1)")]
    Fraction(f64),
}

/// One labeled patch pair: the vulnerable function and its fix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnPair {
    pub id: String,
    pub pre_code: String,
    pub post_code: String,
    pub code_diff: String,
    pub cve_id: Option<String>,
    pub cwe_id: Option<String>,
    pub cve_description: Option<String>,
    pub commit_message: Option<String>,
    pub type_index: usize,
}

impl VulnPair {
    /// True when any of the optional vulnerability metadata is present.
    pub fn has_metadata(&self) -> bool {
        self.cve_id.is_some()
            || self.cwe_id.is_some()
            || self.cve_description.is_some()
            || self.commit_message.is_some()
    }
}

/// Ordered vulnerability-type labels plus the CWE → type mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeList {
    names: Vec<String>,
    cwe_to_type: BTreeMap<String, usize>,
}

impl TypeList {
    /// Builds a type list. An `"other"` bucket is appended when the names do
    /// not already contain one.
    pub fn new(
        names: Vec<String>,
        cwe_to_type: impl IntoIterator<Item = (String, usize)>,
    ) -> Result<Self, CorpusError> {
        let mut names = names;
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(CorpusError::TypeList(format!("duplicate type name `{n}`")));
            }
        }
        if !names.iter().any(|n| n == OTHER_TYPE) {
            names.push(OTHER_TYPE.to_string());
        }
        let mut map = BTreeMap::new();
        for (cwe, idx) in cwe_to_type {
            if idx >= names.len() {
                return Err(CorpusError::TypeList(format!(
                    "{cwe} maps to type {idx}, but only {} types exist",
                    names.len()
                )));
            }
            map.insert(normalize_cwe(&cwe), idx);
        }
        Ok(Self { names, cwe_to_type: map })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: TypeList = serde_json::from_str(&text)
            .map_err(|e| CorpusError::TypeList(format!("{}: {e}", path.display())))?;
        Self::new(raw.names, raw.cwe_to_type)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn other_index(&self) -> usize {
        self.names
            .iter()
            .position(|n| n == OTHER_TYPE)
            .expect("type list always holds an `other` bucket")
    }

    pub fn lookup(&self, cwe: &str) -> Option<usize> {
        self.cwe_to_type.get(&normalize_cwe(cwe)).copied()
    }
}

/// Canonical `CWE-<n>` spelling; accepts `369`, `cwe-369`, ` CWE-369 `.
pub fn normalize_cwe(cwe: &str) -> String {
    let t = cwe.trim();
    let digits = t
        .strip_prefix("CWE-")
        .or_else(|| t.strip_prefix("cwe-"))
        .or_else(|| t.strip_prefix("Cwe-"))
        .unwrap_or(t);
    format!("CWE-{}", digits.trim())
}

/// Type index for a pair: the mapped index of its CWE, else the `other` bucket.
pub fn get_vuln_type(pair: &VulnPair, type_list: &TypeList) -> usize {
    pair.cwe_id
        .as_deref()
        .and_then(|c| type_list.lookup(c))
        .unwrap_or_else(|| type_list.other_index())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<VulnPair>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(pairs: Vec<VulnPair>, split: SplitTag) -> Self {
        Self { pairs, split }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VulnPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }
}

/// On-disk corpus record. Unknown keys are ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: Option<String>,
    pub pre_code: Option<String>,
    pub post_code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_diff: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cve_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cwe_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cve_description: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commit_message: Option<String>,
}

impl From<&VulnPair> for CorpusRecord {
    fn from(p: &VulnPair) -> Self {
        Self {
            id: Some(p.id.clone()),
            pre_code: Some(p.pre_code.clone()),
            post_code: Some(p.post_code.clone()),
            code_diff: Some(p.code_diff.clone()),
            cve_id: p.cve_id.clone(),
            cwe_id: p.cwe_id.clone(),
            cve_description: p.cve_description.clone(),
            commit_message: p.commit_message.clone(),
        }
    }
}

/// Validates one record and resolves its type. `line` is 1-based.
pub fn pair_from_record(
    record: CorpusRecord,
    line: usize,
    type_list: &TypeList,
) -> Result<VulnPair, CorpusError> {
    let id = record.id.ok_or(CorpusError::MissingField { line, field: "id" })?;
    let pre_code = record.pre_code.ok_or(CorpusError::MissingField { line, field: "pre_code" })?;
    let post_code = record.post_code.ok_or(CorpusError::MissingField { line, field: "post_code" })?;
    let reject = |reason: &str| CorpusError::Rejected { line, id: id.clone(), reason: reason.into() };
    if id.trim().is_empty() {
        return Err(reject("empty id"));
    }
    if pre_code.trim().is_empty() || post_code.trim().is_empty() {
        return Err(reject("empty pre/post code"));
    }
    if pre_code == post_code {
        return Err(reject("identical pre/post code"));
    }
    let regenerated = compute_code_diff(&pre_code, &post_code);
    match apply_unified_diff(&pre_code, &regenerated) {
        Ok(patched) if patched == post_code => {}
        _ => return Err(reject("regenerated diff does not reproduce post_code")),
    }
    let code_diff = match record.code_diff {
        Some(d) if !d.trim().is_empty() => d,
        _ => regenerated,
    };
    let mut pair = VulnPair {
        id,
        pre_code,
        post_code,
        code_diff,
        cve_id: record.cve_id,
        cwe_id: record.cwe_id,
        cve_description: record.cve_description,
        commit_message: record.commit_message,
        type_index: 0,
    };
    pair.type_index = get_vuln_type(&pair, type_list);
    Ok(pair)
}

/// Parses JSON-lines corpus text. Blank lines are skipped.
pub fn parse_corpus(text: &str, type_list: &TypeList, split: SplitTag) -> Result<Dataset, CorpusError> {
    let mut pairs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(raw)
            .map_err(|e| CorpusError::Malformed { line, message: e.to_string() })?;
        let pair = pair_from_record(record, line, type_list)?;
        if !ids.insert(pair.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: pair.id });
        }
        pairs.push(pair);
    }
    Ok(Dataset::new(pairs, split))
}

pub fn load_corpus(path: &Path, type_list: &TypeList) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, type_list, SplitTag::Train)
}

pub fn write_corpus(path: &Path, pairs: &[VulnPair]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    for p in pairs {
        let line = serde_json::to_string(&CorpusRecord::from(p)).expect("corpus record serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Stratified split: each type contributes `ceil(fraction * count)` pairs to
/// the eval side, chosen by a seeded shuffle. Both sides keep input order.
pub fn split_eval_set(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::Fraction(fraction));
    }
    let mut by_type: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in dataset.pairs.iter().enumerate() {
        by_type.entry(p.type_index).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_eval = vec![false; dataset.len()];
    for members in by_type.values() {
        let take = (fraction * members.len() as f64).ceil() as usize;
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in shuffled.iter().take(take.min(members.len())) {
            in_eval[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (p, e) in dataset.pairs.iter().zip(in_eval) {
        if e {
            eval.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((Dataset::new(train, SplitTag::Train), Dataset::new(eval, SplitTag::Eval)))
}
