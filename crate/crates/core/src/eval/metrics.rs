use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::verdict::{Label, Verdict};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot compute metrics over an empty input")]
    Empty,
}

/// Confusion counts with the vulnerable class as positive. UNKNOWN
/// predictions are counted as predicted-NO and also tallied in `unknown`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unknown: usize,
    /// Predictions matching the truth; UNKNOWN never counts.
    pub correct: usize,
    pub total: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: Label, vulnerable: bool) {
        self.total += 1;
        match (predicted, vulnerable) {
            (Label::Yes, true) => self.tp += 1,
            (Label::Yes, false) => self.fp += 1,
            (_, true) => self.fn_ += 1,
            (_, false) => self.tn += 1,
        }
        if predicted == Label::Unknown {
            self.unknown += 1;
        } else if predicted == Label::for_truth(vulnerable) {
            self.correct += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationMetrics {
    pub fn from_confusion(c: Confusion) -> Result<Self, MetricsError> {
        if c.total == 0 {
            return Err(MetricsError::Empty);
        }
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Ok(Self { accuracy: ratio(c.correct, c.total), precision, recall, f1, confusion: c })
    }
}

/// Accuracy, precision, recall and F1 over `(prediction, is_vulnerable)`.
pub fn compute_metrics(items: &[(Label, bool)]) -> Result<ClassificationMetrics, MetricsError> {
    let mut c = Confusion::default();
    for &(label, vulnerable) in items {
        c.add(label, vulnerable);
    }
    ClassificationMetrics::from_confusion(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairClass {
    CorrectPair,
    WrongPair,
    Mixed,
}

impl PairClass {
    pub fn classify(pre: Label, post: Label) -> Self {
        match (pre, post) {
            (Label::Yes, Label::No) => PairClass::CorrectPair,
            (Label::No, Label::Yes) => PairClass::WrongPair,
            _ => PairClass::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub pair_id: String,
    pub pre_verdict: Verdict,
    pub post_verdict: Verdict,
    pub classification: PairClass,
}

impl PairOutcome {
    pub fn new(pair_id: impl Into<String>, pre_verdict: Verdict, post_verdict: Verdict) -> Self {
        let classification = PairClass::classify(pre_verdict.label, post_verdict.label);
        Self { pair_id: pair_id.into(), pre_verdict, post_verdict, classification }
    }
}

/// `(correct_pairs - wrong_pairs) / all_pairs`.
pub fn compute_vp_score(outcomes: &[PairOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let count = |k| outcomes.iter().filter(|o| o.classification == k).count() as f64;
    Ok((count(PairClass::CorrectPair) - count(PairClass::WrongPair)) / outcomes.len() as f64)
}

/// Token-length bucket edges: `[0,512) [512,1024) [1024,2048) [2048,inf)`.
pub const BUCKET_EDGES: [usize; 3] = [512, 1024, 2048];

pub fn bucket_index(tokens: usize) -> usize {
    BUCKET_EDGES.iter().take_while(|&&edge| tokens >= edge).count()
}

pub fn bucket_label(index: usize) -> String {
    match index {
        0 => format!("<{}", BUCKET_EDGES[0]),
        i if i < BUCKET_EDGES.len() => format!("{}-{}", BUCKET_EDGES[i - 1], BUCKET_EDGES[i]),
        _ => format!(">={}", BUCKET_EDGES[BUCKET_EDGES.len() - 1]),
    }
}

/// One scored snippet for bucketed reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoredItem {
    pub token_count: usize,
    pub predicted: Label,
    pub vulnerable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    /// Share of all items falling in this bucket.
    pub ratio: f64,
    /// `None` for an empty bucket.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

pub fn bucket_report(items: &[ScoredItem]) -> Vec<BucketRow> {
    let n_buckets = BUCKET_EDGES.len() + 1;
    let mut confusion = vec![Confusion::default(); n_buckets];
    for it in items {
        confusion[bucket_index(it.token_count)].add(it.predicted, it.vulnerable);
    }
    confusion
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let m = ClassificationMetrics::from_confusion(c).ok();
            BucketRow {
                bucket: bucket_label(i),
                count: c.total,
                ratio: ratio(c.total, items.len()),
                accuracy: m.map(|m| m.accuracy),
                f1: m.map(|m| m.f1),
            }
        })
        .collect()
}
