use std::fmt::Write as _;
use std::thread;

use serde::{Deserialize, Serialize};

use super::metrics::{
    bucket_report, compute_vp_score, BucketRow, ClassificationMetrics, Confusion, MetricsError, PairClass, PairOutcome,
    ScoredItem,
};
use super::verdict::{parse_prediction, Label, Verdict};
use crate::bvd::QuestionTemplate;
use crate::corpus::{Dataset, VulnPair};
use crate::toymodel::{count_tokens, ToyPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Pre,
    Post,
}

/// Raw model output for one snippet and its parsed verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub pair_id: String,
    pub side: Side,
    pub raw_text: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionOptions {
    pub max_new_tokens: usize,
    /// Worker threads; the policy is shared read-only.
    pub threads: usize,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self { max_new_tokens: crate::genclient::DEFAULT_MAX_NEW_TOKENS, threads: 4 }
    }
}

/// Greedy detection answer for one code snippet.
pub fn detect(policy: &ToyPolicy, question: &QuestionTemplate, code: &str, max_new_tokens: usize) -> (String, Verdict) {
    let vocab = policy.vocab();
    let prompt = vocab.tokenize(&question.render(code));
    let out = policy.generate(&prompt, 0.0, max_new_tokens, 0);
    let text = vocab.decode(&out);
    let verdict = parse_prediction(&text);
    (text, verdict)
}

/// Detections of one pair, pre first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairDetection {
    pub pair_id: String,
    pub type_index: usize,
    pub pre_tokens: usize,
    pub post_tokens: usize,
    pub pre: Transcript,
    pub post: Transcript,
}

impl PairDetection {
    pub fn outcome(&self) -> PairOutcome {
        PairOutcome::new(self.pair_id.clone(), self.pre.verdict.clone(), self.post.verdict.clone())
    }
}

fn detect_pair(policy: &ToyPolicy, question: &QuestionTemplate, pair: &VulnPair, max_new: usize) -> PairDetection {
    let side = |side, code: &str| {
        let (raw_text, verdict) = detect(policy, question, code, max_new);
        Transcript { pair_id: pair.id.clone(), side, raw_text, verdict }
    };
    PairDetection {
        pair_id: pair.id.clone(),
        type_index: pair.type_index,
        pre_tokens: count_tokens(&pair.pre_code),
        post_tokens: count_tokens(&pair.post_code),
        pre: side(Side::Pre, &pair.pre_code),
        post: side(Side::Post, &pair.post_code),
    }
}

/// Greedy detection over every pre- and post-code of `dataset`, in order.
pub fn run_detection(
    policy: &ToyPolicy,
    dataset: &Dataset,
    question: &QuestionTemplate,
    options: &DetectionOptions,
) -> Vec<PairDetection> {
    let pairs = &dataset.pairs;
    let workers = options.threads.max(1).min(pairs.len().max(1));
    let chunk = pairs.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter().map(|p| detect_pair(policy, question, p, options.max_new_tokens)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("detection worker panicked")).collect()
    })
}

pub fn transcripts(detections: &[PairDetection]) -> Vec<Transcript> {
    detections.iter().flat_map(|d| [d.pre.clone(), d.post.clone()]).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub pairs: usize,
    pub snippets: usize,
    pub correct_pairs: usize,
    pub wrong_pairs: usize,
    pub mixed_pairs: usize,
    pub unknown_verdicts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub type_name: String,
    pub pairs: usize,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub vp_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub vp_score: f64,
    pub counts: PairCounts,
    pub confusion: Confusion,
    pub per_type: Vec<TypeRow>,
    pub buckets: Vec<BucketRow>,
    pub config_hash: String,
    pub seed: u64,
}

fn snippet_confusion<'a>(dets: impl Iterator<Item = &'a PairDetection>) -> Confusion {
    let mut c = Confusion::default();
    for d in dets {
        c.add(d.pre.verdict.label, true);
        c.add(d.post.verdict.label, false);
    }
    c
}

impl MetricsReport {
    pub fn build(
        detections: &[PairDetection],
        type_names: &[String],
        config_hash: &str,
        seed: u64,
    ) -> Result<Self, MetricsError> {
        let overall = ClassificationMetrics::from_confusion(snippet_confusion(detections.iter()))?;
        let outcomes: Vec<PairOutcome> = detections.iter().map(PairDetection::outcome).collect();
        let vp_score = compute_vp_score(&outcomes)?;
        let count = |k| outcomes.iter().filter(|o| o.classification == k).count();
        let counts = PairCounts {
            pairs: outcomes.len(),
            snippets: 2 * outcomes.len(),
            correct_pairs: count(PairClass::CorrectPair),
            wrong_pairs: count(PairClass::WrongPair),
            mixed_pairs: count(PairClass::Mixed),
            unknown_verdicts: overall.confusion.unknown,
        };
        let per_type = type_names
            .iter()
            .enumerate()
            .map(|(ti, name)| {
                let of_type: Vec<&PairDetection> = detections.iter().filter(|d| d.type_index == ti).collect();
                let m = ClassificationMetrics::from_confusion(snippet_confusion(of_type.iter().copied())).ok();
                let outs: Vec<PairOutcome> = of_type.iter().map(|d| d.outcome()).collect();
                TypeRow {
                    type_name: name.clone(),
                    pairs: of_type.len(),
                    accuracy: m.map(|m| m.accuracy),
                    f1: m.map(|m| m.f1),
                    vp_score: compute_vp_score(&outs).ok(),
                }
            })
            .collect();
        let items: Vec<ScoredItem> = detections
            .iter()
            .flat_map(|d| {
                [
                    ScoredItem { token_count: d.pre_tokens, predicted: d.pre.verdict.label, vulnerable: true },
                    ScoredItem { token_count: d.post_tokens, predicted: d.post.verdict.label, vulnerable: false },
                ]
            })
            .collect();
        Ok(Self {
            accuracy: overall.accuracy,
            precision: overall.precision,
            recall: overall.recall,
            f1: overall.f1,
            vp_score,
            counts,
            confusion: overall.confusion,
            per_type,
            buckets: bucket_report(&items),
            config_hash: config_hash.to_string(),
            seed,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        let _ = writeln!(s, "config {}  seed {}", self.config_hash, self.seed);
        let _ = writeln!(s, "{:<12} {:>8}", "metric", "value");
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("vp_score", self.vp_score),
        ] {
            let _ = writeln!(s, "{k:<12} {v:>8.4}");
        }
        let c = &self.counts;
        let _ = writeln!(
            s,
            "pairs {}  correct {}  wrong {}  mixed {}  unknown verdicts {}",
            c.pairs, c.correct_pairs, c.wrong_pairs, c.mixed_pairs, c.unknown_verdicts
        );
        let _ = writeln!(s, "\n{:<16} {:>6} {:>9} {:>9} {:>9}", "type", "pairs", "accuracy", "f1", "vp_score");
        for r in &self.per_type {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>9} {:>9} {:>9}",
                r.type_name,
                r.pairs,
                opt(r.accuracy),
                opt(r.f1),
                opt(r.vp_score)
            );
        }
        let _ = writeln!(s, "\n{:<12} {:>6} {:>7} {:>9} {:>9}", "tokens", "count", "ratio", "accuracy", "f1");
        for b in &self.buckets {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>7.3} {:>9} {:>9}",
                b.bucket,
                b.count,
                b.ratio,
                opt(b.accuracy),
                opt(b.f1)
            );
        }
        s
    }
}

/// Labels of a detection run as `(prediction, is_vulnerable)` per snippet.
pub fn labeled_predictions(detections: &[PairDetection]) -> Vec<(Label, bool)> {
    detections.iter().flat_map(|d| [(d.pre.verdict.label, true), (d.post.verdict.label, false)]).collect()
}
