//! Curriculum online preference optimization.
//!
//! Each round measures per-type detection accuracy on the evaluation split,
//! samples training pairs with probability `1 - accuracy` of their type,
//! assigns every selected pair one reasoning task, and fits the policy to
//! the accumulated preference pairs with the identity preference loss
//! against a reference snapshot taken at the start of the round.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvd::{
    answer_slice, reasoning_request, validate_answer, AugmentedExample, QuestionTemplate, ReasoningDirection,
};
use crate::corpus::{Dataset, TypeList, VulnPair};
use crate::eval::{run_detection, DetectionOptions, Label, PairDetection};
use crate::genclient::{generate, GenerationBackend, RetryPolicy};
use crate::optim::{build_optimizer, OptimizerConfig, OptimizerError};
use crate::toymodel::{ParamTable, PolicyError, TokenId, ToyPolicy};
use crate::tsft::Sequence;

#[derive(Debug, Error)]
pub enum CopoError {
    #[error("evaluation split is empty")]
    EmptyEvalSet,
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("pair {pair_id}: preferred and dispreferred responses are identical")]
    Degenerate { pair_id: String },
    #[error("pair {pair_id}: no usable {direction} answer: {reason}")]
    Regeneration { pair_id: String, direction: &'static str, reason: String },
    #[error("non-finite preference loss in round {round} at step {step}")]
    NonFinite { round: usize, step: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    VulnerableLineLocation,
    TriggerPath,
    RootCause,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::VulnerableLineLocation, Self::TriggerPath, Self::RootCause];

    /// 1-based item of the reasoning answer that serves this task.
    pub fn item(self) -> usize {
        match self {
            Self::VulnerableLineLocation => 1,
            Self::TriggerPath => 2,
            Self::RootCause => 3,
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Self::VulnerableLineLocation => "Task: locate the vulnerable line.",
            Self::TriggerPath => "Task: trace the control flow and data flow that trigger the vulnerability.",
            Self::RootCause => "Task: interpret the root cause of the vulnerability.",
        }
    }
}

/// The detection question over `code` followed by the task instruction.
pub fn task_prompt(question: &QuestionTemplate, code: &str, task: TaskKind) -> String {
    format!("{}\n{}", question.render(code), task.instruction())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub round: usize,
    pub per_type: Vec<f64>,
    /// Snippets of each type in the evaluation split.
    pub support: Vec<usize>,
    pub zero_support: Vec<bool>,
}

impl TypeAccuracy {
    /// Snippet-level accuracy per type; a type without support scores 1.0.
    pub fn from_detections(detections: &[PairDetection], type_count: usize, round: usize) -> Self {
        let mut correct = vec![0usize; type_count];
        let mut support = vec![0usize; type_count];
        for d in detections {
            let Some(ti) = (d.type_index < type_count).then_some(d.type_index) else { continue };
            support[ti] += 2;
            correct[ti] += usize::from(d.pre.verdict.label == Label::Yes) + usize::from(d.post.verdict.label == Label::No);
        }
        let per_type = correct
            .iter()
            .zip(&support)
            .map(|(&c, &n)| if n == 0 { 1.0 } else { c as f64 / n as f64 })
            .collect();
        let zero_support = support.iter().map(|&n| n == 0).collect();
        Self { round, per_type, support, zero_support }
    }
}

pub fn eval_type_accuracy(
    policy: &ToyPolicy,
    eval_set: &Dataset,
    type_list: &TypeList,
    question: &QuestionTemplate,
    detection: &DetectionOptions,
    round: usize,
) -> Result<TypeAccuracy, CopoError> {
    if eval_set.is_empty() {
        return Err(CopoError::EmptyEvalSet);
    }
    let dets = run_detection(policy, eval_set, question, detection);
    Ok(TypeAccuracy::from_detections(&dets, type_list.len(), round))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProbabilities {
    pub per_type: Vec<f64>,
}

impl SelectionProbabilities {
    pub fn new(per_type: Vec<f64>) -> Self {
        Self { per_type }
    }

    pub fn complement(&self) -> Vec<f64> {
        self.per_type.iter().map(|p| 1.0 - p).collect()
    }
}

pub fn selection_probabilities(acc: &TypeAccuracy) -> SelectionProbabilities {
    SelectionProbabilities { per_type: acc.per_type.iter().map(|t| 1.0 - t).collect() }
}

const STREAM_SAMPLE: u64 = 0;
const STREAM_TASKS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

fn round_rng(seed: u64, round: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64 * 3 + stream);
    rng
}

/// Bernoulli draw per pair (in dataset order) against its type's
/// probability, merged with `prev`. The result lists train ids in dataset
/// order, followed by any `prev` ids absent from `train`.
pub fn sample_instances(
    train: &Dataset,
    probs: &SelectionProbabilities,
    prev: &[String],
    seed: u64,
    round: usize,
) -> Vec<String> {
    let mut rng = round_rng(seed, round, STREAM_SAMPLE);
    let prev_set: BTreeSet<&str> = prev.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for pair in &train.pairs {
        let p = probs.per_type.get(pair.type_index).copied().unwrap_or(0.0);
        let draw: f64 = rng.gen();
        if draw < p || prev_set.contains(pair.id.as_str()) {
            out.push(pair.id.clone());
        }
    }
    let in_train: BTreeSet<&str> = train.ids().collect();
    out.extend(prev.iter().filter(|id| !in_train.contains(id.as_str())).cloned());
    out
}

/// One uniformly drawn task per id.
pub fn decompose_tasks(ids: &[String], seed: u64, round: usize) -> Vec<(String, TaskKind)> {
    let mut rng = round_rng(seed, round, STREAM_TASKS);
    ids.iter().map(|id| (id.clone(), TaskKind::ALL[rng.gen_range(0..TaskKind::ALL.len())])).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub round: usize,
    pub task: TaskKind,
    pub prompt_x: String,
    pub y_w: String,
    pub y_l: String,
}

/// Preference pairs accumulated over rounds; keyed by `(pair_id, round)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub round: usize,
    pub pairs: Vec<PreferencePair>,
}

impl PreferenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair_id: &str, round: usize) -> bool {
        self.pairs.iter().any(|p| p.pair_id == pair_id && p.round == round)
    }

    /// Adds `pair` unless its `(pair_id, round)` is already present.
    pub fn insert(&mut self, pair: PreferencePair) -> bool {
        if self.contains(&pair.pair_id, pair.round) {
            return false;
        }
        self.round = self.round.max(pair.round);
        self.pairs.push(pair);
        true
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            s.push_str(&serde_json::to_string(p).expect("preference pair serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CopoError> {
        let io = |source| CopoError::Io { path: path.display().to_string(), source };
        fs::File::create(path).and_then(|mut f| f.write_all(self.to_jsonl().as_bytes())).map_err(io)
    }
}

fn regenerate(
    pair: &VulnPair,
    direction: ReasoningDirection,
    backend: &dyn GenerationBackend,
    budget: u32,
) -> Result<String, CopoError> {
    let request = reasoning_request(pair, direction).with_temperature(1.0);
    let mut reason = String::from("no attempts");
    for _ in 0..budget.max(1) {
        match generate(&request, backend, &RetryPolicy::default()) {
            Ok(r) => {
                let failures = validate_answer(&r.text, direction);
                if failures.is_empty() {
                    return Ok(r.text);
                }
                reason = failures.iter().map(|f| f.code()).collect::<Vec<_>>().join(",");
            }
            Err(e) => reason = e.to_string(),
        }
    }
    Err(CopoError::Regeneration { pair_id: pair.id.clone(), direction: direction.as_str(), reason })
}

/// Preference pair for `task` over the pre-code: the forward answer's slice
/// is preferred over the backward answer's slice. Missing answers are
/// regenerated through `backend` at temperature 1.
pub fn build_preference_pair(
    pair: &VulnPair,
    augmented: Option<&AugmentedExample>,
    task: TaskKind,
    round: usize,
    question: &QuestionTemplate,
    backend: Option<&dyn GenerationBackend>,
    regeneration_budget: u32,
) -> Result<PreferencePair, CopoError> {
    let answer = |direction: ReasoningDirection| -> Result<String, CopoError> {
        if let Some(ex) = augmented {
            return Ok(ex.answer(direction).to_string());
        }
        match backend {
            Some(b) => regenerate(pair, direction, b, regeneration_budget),
            None => Err(CopoError::Regeneration {
                pair_id: pair.id.clone(),
                direction: direction.as_str(),
                reason: "no augmented example and no backend".into(),
            }),
        }
    };
    let slice = |text: String, direction: ReasoningDirection| {
        answer_slice(&text, task.item()).ok_or_else(|| CopoError::Regeneration {
            pair_id: pair.id.clone(),
            direction: direction.as_str(),
            reason: format!("answer has no item {}", task.item()),
        })
    };
    let y_w = slice(answer(ReasoningDirection::Forward)?, ReasoningDirection::Forward)?;
    let y_l = slice(answer(ReasoningDirection::Backward)?, ReasoningDirection::Backward)?;
    if y_w == y_l {
        return Err(CopoError::Degenerate { pair_id: pair.id.clone() });
    }
    Ok(PreferencePair {
        pair_id: pair.id.clone(),
        round,
        task,
        prompt_x: task_prompt(question, &pair.pre_code, task),
        y_w,
        y_l,
    })
}

/// Tokenized preference pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPreference {
    pub prompt: Vec<TokenId>,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
}

impl EncodedPreference {
    pub fn encode(pair: &PreferencePair, policy: &ToyPolicy, max_sequence_tokens: usize) -> Self {
        let vocab = policy.vocab();
        let mut w = Sequence::encode(vocab, &pair.prompt_x, &pair.y_w);
        let mut l = Sequence::encode(vocab, &pair.prompt_x, &pair.y_l);
        w.truncate(max_sequence_tokens);
        l.truncate(max_sequence_tokens);
        // both responses condition on the shorter of the two prompt cuts
        let prompt = if w.prompt.len() <= l.prompt.len() { w.prompt } else { l.prompt };
        Self { prompt, y_w: w.target, y_l: l.target }
    }

    /// `log pi(y_w|x) - log pi(y_l|x)`.
    pub fn margin(&self, policy: &ToyPolicy) -> f64 {
        policy.log_prob(&self.prompt, &self.y_w) - policy.log_prob(&self.prompt, &self.y_l)
    }
}

/// Policy log-ratio gap minus the reference's.
pub fn ipo_h_encoded(policy: &ToyPolicy, reference: &ToyPolicy, pair: &EncodedPreference) -> f64 {
    pair.margin(policy) - pair.margin(reference)
}

pub fn ipo_h(policy: &ToyPolicy, reference: &ToyPolicy, pair: &PreferencePair) -> f64 {
    ipo_h_encoded(policy, reference, &EncodedPreference::encode(pair, policy, usize::MAX))
}

/// Regression target of `h`: `1 / (2 tau)`.
pub fn ipo_target(tau: f64) -> f64 {
    1.0 / (2.0 * tau)
}

pub fn ipo_loss_encoded(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[EncodedPreference],
    tau: f64,
) -> Result<f64, CopoError> {
    if batch.is_empty() {
        return Err(CopoError::EmptyBatch);
    }
    let target = ipo_target(tau);
    Ok(batch.iter().map(|p| (ipo_h_encoded(policy, reference, p) - target).powi(2)).sum::<f64>() / batch.len() as f64)
}

/// Mean over the batch of `(h - 1/(2 tau))^2`.
pub fn ipo_loss(policy: &ToyPolicy, reference: &ToyPolicy, batch: &[PreferencePair], tau: f64) -> Result<f64, CopoError> {
    let encoded: Vec<_> = batch.iter().map(|p| EncodedPreference::encode(p, policy, usize::MAX)).collect();
    ipo_loss_encoded(policy, reference, &encoded, tau)
}

/// Adds `scale * d (h - target)^2 / d params` into `grad`; returns `h`.
pub fn accumulate_ipo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &EncodedPreference,
    tau: f64,
    scale: f64,
    grad: &mut ParamTable,
) -> f64 {
    let h = ipo_h_encoded(policy, reference, pair);
    let coef = 2.0 * (h - ipo_target(tau)) * scale;
    policy.accumulate_grad_log_prob(&pair.prompt, &pair.y_w, coef, grad);
    policy.accumulate_grad_log_prob(&pair.prompt, &pair.y_l, -coef, grad);
    h
}

/// Fraction of pairs whose preferred response is strictly more likely.
pub fn reward_accuracy(policy: &ToyPolicy, pairs: &[EncodedPreference]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| p.margin(policy) > 0.0).count() as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CopoConfig {
    pub rounds: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub seed: u64,
    pub max_sequence_tokens: usize,
    /// Temperature-1 regeneration attempts per missing answer.
    pub regeneration_budget: u32,
    pub detection_max_new_tokens: usize,
    pub detection_threads: usize,
}

impl Default for CopoConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            tau: 0.1,
            learning_rate: 1e-4,
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            epochs_per_round: 1,
            seed: 0,
            max_sequence_tokens: 2048,
            regeneration_budget: 2,
            detection_max_new_tokens: crate::genclient::DEFAULT_MAX_NEW_TOKENS,
            detection_threads: 4,
        }
    }
}

impl CopoConfig {
    fn validate(&self) -> Result<(), CopoError> {
        if self.tau.is_nan() || self.tau <= 0.0 || self.batch_size == 0 || self.epochs_per_round == 0 {
            return Err(CopoError::Config("tau, batch_size and epochs_per_round must be positive".into()));
        }
        Ok(())
    }

    pub fn detection(&self) -> DetectionOptions {
        DetectionOptions { max_new_tokens: self.detection_max_new_tokens, threads: self.detection_threads }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopoStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub type_accuracy: TypeAccuracy,
    pub probabilities: SelectionProbabilities,
    pub selected_ids: Vec<String>,
    pub tasks: Vec<(String, TaskKind)>,
    /// Selected pairs that produced no preference pair.
    pub skipped: Vec<String>,
    pub new_pairs: usize,
    pub preference_set_size: usize,
    pub steps: Vec<CopoStep>,
    pub mean_loss: Option<f64>,
    /// Mean `log pi(y_w|x) - log pi(y_l|x)` over the round's pairs, before
    /// and after the round's updates.
    pub mean_margin_before: Option<f64>,
    pub mean_margin_after: Option<f64>,
    pub reward_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CopoReport {
    pub rounds: Vec<RoundReport>,
}

impl CopoReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("copo report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct CopoOutcome {
    pub policy: ToyPolicy,
    pub report: CopoReport,
    /// The accumulated preference set after each round.
    pub preference_sets: Vec<PreferenceSet>,
}

/// Inputs of a COPO run besides the policy.
pub struct CopoInputs<'a> {
    pub train: &'a Dataset,
    pub augmented: &'a [AugmentedExample],
    pub eval_set: &'a Dataset,
    pub type_list: &'a TypeList,
    pub question: &'a QuestionTemplate,
    pub backend: Option<&'a dyn GenerationBackend>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn run_copo(mut policy: ToyPolicy, inputs: &CopoInputs<'_>, config: &CopoConfig) -> Result<CopoOutcome, CopoError> {
    config.validate()?;
    if config.rounds > 0 && inputs.eval_set.is_empty() {
        return Err(CopoError::EmptyEvalSet);
    }
    let by_id: HashMap<&str, &AugmentedExample> = inputs.augmented.iter().map(|a| (a.pair_id.as_str(), a)).collect();
    let mut report = CopoReport::default();
    let mut sets = Vec::new();
    let mut prefs = PreferenceSet::default();
    let mut encoded: Vec<EncodedPreference> = Vec::new();
    let mut selected: Vec<String> = Vec::new();
    let mut opt = build_optimizer(&config.optimizer, config.learning_rate)?;
    let mut step = 0;

    for round in 0..config.rounds {
        let acc = eval_type_accuracy(
            &policy,
            inputs.eval_set,
            inputs.type_list,
            inputs.question,
            &config.detection(),
            round,
        )?;
        let probs = selection_probabilities(&acc);
        selected = sample_instances(inputs.train, &probs, &selected, config.seed, round);
        let tasks = decompose_tasks(&selected, config.seed, round);
        let mut skipped = Vec::new();
        let mut new_pairs = 0;
        for (id, task) in &tasks {
            let Some(pair) = inputs.train.get(id) else {
                skipped.push(id.clone());
                continue;
            };
            let built = build_preference_pair(
                pair,
                by_id.get(id.as_str()).copied(),
                *task,
                round,
                inputs.question,
                inputs.backend,
                config.regeneration_budget,
            );
            match built {
                Ok(pp) => {
                    let enc = EncodedPreference::encode(&pp, &policy, config.max_sequence_tokens);
                    if prefs.insert(pp) {
                        encoded.push(enc);
                        new_pairs += 1;
                    }
                }
                Err(e) => {
                    log::warn!("round {round}: skipping {id}: {e}");
                    skipped.push(id.clone());
                }
            }
        }
        prefs.round = round;

        let reference = policy.clone_frozen();
        let margin_before = mean(encoded.iter().map(|p| p.margin(&policy)));
        let mut steps = Vec::new();
        let mut rng = round_rng(config.seed, round, STREAM_SHUFFLE);
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        for _ in 0..config.epochs_per_round {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let mut grad = policy.zero_table();
                let mut loss = 0.0;
                for &i in batch {
                    let h = accumulate_ipo_grad(&policy, &reference, &encoded[i], config.tau, scale, &mut grad);
                    loss += (h - ipo_target(config.tau)).powi(2) * scale;
                }
                if !loss.is_finite() {
                    return Err(CopoError::NonFinite { round, step });
                }
                opt.step(&mut policy, &grad)?;
                if !policy.params().is_finite() {
                    return Err(CopoError::NonFinite { round, step });
                }
                log::debug!("copo round {round} step {step} loss {loss:.4}");
                steps.push(CopoStep { step, loss });
                step += 1;
            }
        }
        let reward = reward_accuracy(&policy, &encoded);
        let round_report = RoundReport {
            round,
            probabilities: probs,
            selected_ids: selected.clone(),
            tasks,
            skipped,
            new_pairs,
            preference_set_size: prefs.len(),
            mean_loss: mean(steps.iter().map(|s| s.loss)),
            steps,
            mean_margin_before: margin_before,
            mean_margin_after: mean(encoded.iter().map(|p| p.margin(&policy))),
            reward_accuracy: reward,
            type_accuracy: acc,
        };
        log::info!(
            "copo round {round}: accuracy {:?}, selected {}, set size {}, reward accuracy {:.3}",
            round_report.type_accuracy.per_type,
            round_report.selected_ids.len(),
            round_report.preference_set_size,
            reward
        );
        report.rounds.push(round_report);
        sets.push(prefs.clone());
    }
    Ok(CopoOutcome { policy, report, preference_sets: sets })
}

#[cfg(test)]
mod tests;
