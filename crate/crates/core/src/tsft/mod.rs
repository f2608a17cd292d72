//! Triplet supervised fine-tuning: every augmented example contributes three
//! cross-entropy terms, one each for the pre-code, post-code and code-diff
//! answers, all conditioned on the same detection question.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvd::{AugmentedExample, QuestionTemplate};
use crate::optim::{build_optimizer, OptimizerConfig, OptimizerError};
use crate::toymodel::{PolicyError, TokenId, ToyPolicy, Vocab, EOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    /// Upper bound on prompt plus target tokens of one sequence.
    pub max_sequence_tokens: usize,
    pub seed: u64,
}

impl Default for TsftConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 8, learning_rate: 0.015, optimizer: OptimizerConfig::default(), max_sequence_tokens: 2048, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum TsftError {
    #[error("no training examples")]
    Empty,
    #[error("example {pair_id}: empty target")]
    EmptyTarget { pair_id: String },
    #[error("non-finite loss at epoch {epoch} step {step} (example {pair_id})")]
    NonFinite { pair_id: String, epoch: usize, step: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One conditioned target: prompt tokens and a completion ending in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Sequence {
    pub fn encode(vocab: &Vocab, prompt: &str, target: &str) -> Self {
        Self { prompt: vocab.tokenize(prompt), target: vocab.encode_target(target) }
    }

    /// Cuts the sequence to `max` tokens. The target tail goes first and the
    /// target keeps its closing EOS; the prompt tail is cut only when the
    /// prompt alone leaves no room. Returns whether anything was cut.
    pub fn truncate(&mut self, max: usize) -> bool {
        let max = max.max(2);
        if self.prompt.len() + self.target.len() <= max {
            return false;
        }
        let keep_target = max.saturating_sub(self.prompt.len()).max(1).min(self.target.len());
        self.target.truncate(keep_target);
        if let Some(last) = self.target.last_mut() {
            *last = EOS_ID;
        }
        let keep_prompt = max - self.target.len();
        self.prompt.truncate(keep_prompt);
        true
    }
}

/// The three sequences of an augmented example, in pre, post, diff order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletExample {
    pub pair_id: String,
    pub sequences: [Sequence; 3],
}

impl TripletExample {
    pub fn encode(ex: &AugmentedExample, vocab: &Vocab, question: &QuestionTemplate) -> Self {
        let seq = |code: &str, answer: &str| Sequence::encode(vocab, &question.render(code), answer);
        Self {
            pair_id: ex.pair_id.clone(),
            sequences: [
                seq(&ex.pre_code, &ex.pre_answer),
                seq(&ex.post_code, &ex.post_answer),
                seq(&ex.code_diff, &ex.diff_answer),
            ],
        }
    }

    fn check(&self) -> Result<(), TsftError> {
        // a bare EOS is an empty answer
        if self.sequences.iter().any(|s| s.target.len() <= 1) {
            return Err(TsftError::EmptyTarget { pair_id: self.pair_id.clone() });
        }
        Ok(())
    }
}

/// `-log p(target | prompt)`.
pub fn cross_entropy(policy: &ToyPolicy, seq: &Sequence) -> f64 {
    -policy.log_prob(&seq.prompt, &seq.target)
}

/// Sum of the three cross-entropy terms of an example.
pub fn tsft_loss(policy: &ToyPolicy, ex: &TripletExample) -> f64 {
    ex.sequences.iter().map(|s| cross_entropy(policy, s)).sum()
}

/// Adds `scale * d tsft_loss / d params` into `grad`; returns the loss.
pub fn accumulate_tsft_grad(policy: &ToyPolicy, ex: &TripletExample, scale: f64, grad: &mut crate::toymodel::ParamTable) -> f64 {
    ex.sequences.iter().map(|s| -policy.accumulate_grad_log_prob(&s.prompt, &s.target, -scale, grad)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean example loss of the batch before the update.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TsftTrace {
    pub steps: Vec<StepRecord>,
    /// Mean example loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
    pub truncated_sequences: usize,
}

impl TsftTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.step, r.loss);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TsftError> {
        fs::write(path, self.to_csv()).map_err(|source| TsftError::Io { path: path.display().to_string(), source })
    }
}

/// Vocabulary over everything the student reads or writes: the question,
/// every code view and answer in `data`, and any `extra` prompt text.
pub fn training_vocab(
    data: &[AugmentedExample],
    question: &QuestionTemplate,
    extra: &[&str],
    max_size: usize,
) -> Result<Vocab, crate::toymodel::VocabError> {
    let rendered = question.render("");
    let texts = data
        .iter()
        .flat_map(|a| [&a.pre_code, &a.post_code, &a.code_diff, &a.pre_answer, &a.post_answer, &a.diff_answer])
        .map(String::as_str)
        .chain(std::iter::once(rendered.as_str()))
        .chain(extra.iter().copied());
    Vocab::build(texts, max_size)
}

pub fn encode_dataset(
    data: &[AugmentedExample],
    vocab: &Vocab,
    question: &QuestionTemplate,
    max_sequence_tokens: usize,
) -> Result<(Vec<TripletExample>, usize), TsftError> {
    let mut truncated = 0;
    let mut out = Vec::with_capacity(data.len());
    for ex in data {
        let mut t = TripletExample::encode(ex, vocab, question);
        t.check()?;
        for s in &mut t.sequences {
            if s.truncate(max_sequence_tokens) {
                truncated += 1;
            }
        }
        out.push(t);
    }
    if truncated > 0 {
        log::warn!("truncated {truncated} sequences to {max_sequence_tokens} tokens");
    }
    Ok((out, truncated))
}

/// Trains `policy` in place on the mean triplet loss.
pub fn train_tsft(
    policy: &mut ToyPolicy,
    data: &[AugmentedExample],
    question: &QuestionTemplate,
    config: &TsftConfig,
) -> Result<TsftTrace, TsftError> {
    train_tsft_with(policy, data, question, config, |_, _| Ok(()))
}

/// [`train_tsft`] calling `on_epoch(epoch, policy)` after every epoch, e.g.
/// to write a checkpoint.
pub fn train_tsft_with(
    policy: &mut ToyPolicy,
    data: &[AugmentedExample],
    question: &QuestionTemplate,
    config: &TsftConfig,
    mut on_epoch: impl FnMut(usize, &ToyPolicy) -> Result<(), TsftError>,
) -> Result<TsftTrace, TsftError> {
    if data.is_empty() {
        return Err(TsftError::Empty);
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(TsftError::Config("epochs and batch_size must be positive".into()));
    }
    let (examples, truncated) = encode_dataset(data, policy.vocab(), question, config.max_sequence_tokens)?;
    let mut trace = TsftTrace { truncated_sequences: truncated, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = build_optimizer(&config.optimizer, config.learning_rate)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = policy.zero_table();
            let mut batch_loss = 0.0;
            for &i in batch {
                let loss = accumulate_tsft_grad(policy, &examples[i], scale, &mut grad);
                if !loss.is_finite() {
                    return Err(TsftError::NonFinite { pair_id: examples[i].pair_id.clone(), epoch, step });
                }
                batch_loss += loss;
            }
            opt.step(policy, &grad)?;
            if !policy.params().is_finite() {
                return Err(TsftError::NonFinite { pair_id: examples[batch[0]].pair_id.clone(), epoch, step });
            }
            epoch_total += batch_loss;
            trace.steps.push(StepRecord { epoch, step, loss: batch_loss * scale });
            log::debug!("tsft epoch {epoch} step {step} loss {:.4}", batch_loss * scale);
            step += 1;
        }
        let mean = epoch_total / examples.len() as f64;
        log::info!("tsft epoch {epoch}: mean loss {mean:.4}");
        trace.epoch_losses.push(mean);
        on_epoch(epoch, policy)?;
    }
    Ok(trace)
}

/// Mean triplet loss over `data` under `policy`, without training.
pub fn mean_tsft_loss(
    policy: &ToyPolicy,
    data: &[AugmentedExample],
    question: &QuestionTemplate,
    max_sequence_tokens: usize,
) -> Result<f64, TsftError> {
    if data.is_empty() {
        return Err(TsftError::Empty);
    }
    let (examples, _) = encode_dataset(data, policy.vocab(), question, max_sequence_tokens)?;
    Ok(examples.iter().map(|e| tsft_loss(policy, e)).sum::<f64>() / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::BOS_ID;

    fn vocab() -> Vocab {
        Vocab::with_words(&["a", "b", "c", "YES", "NO"]).unwrap()
    }

    fn example(id: &str) -> AugmentedExample {
        AugmentedExample {
            pair_id: id.into(),
            pre_code: "a b".into(),
            pre_answer: "YES a".into(),
            post_code: "a b c".into(),
            post_answer: "NO b".into(),
            code_diff: "c".into(),
            diff_answer: "YES c".into(),
        }
    }

    #[test]
    fn loss_is_sum_of_three_terms() {
        let v = vocab();
        let p = ToyPolicy::random(v.clone(), 0.5, 3);
        let t = TripletExample::encode(&example("x"), &v, &QuestionTemplate::default());
        let parts: Vec<f64> = t.sequences.iter().map(|s| cross_entropy(&p, s)).collect();
        assert!((tsft_loss(&p, &t) - parts.iter().sum::<f64>()).abs() < 1e-12);
        // uniform policy: each target costs len * ln V
        let u = ToyPolicy::uniform(v.clone());
        let expected = 3.0 * 3.0 * (v.len() as f64).ln();
        assert!((tsft_loss(&u, &t) - expected).abs() < 1e-9);
    }

    #[test]
    fn empty_answer_rejected() {
        let mut ex = example("e");
        ex.post_answer = String::new();
        let mut p = ToyPolicy::uniform(vocab());
        let err = train_tsft(&mut p, &[ex], &QuestionTemplate::default(), &TsftConfig::default()).unwrap_err();
        assert!(matches!(err, TsftError::EmptyTarget { pair_id } if pair_id == "e"));
    }

    #[test]
    fn truncation_keeps_eos() {
        let mut s = Sequence { prompt: vec![BOS_ID, 5, 6, 7, EOS_ID], target: vec![3, 4, 5, 6, EOS_ID] };
        assert!(s.truncate(8));
        assert_eq!(s.target, vec![3, 4, EOS_ID]);
        assert_eq!(s.prompt.len() + s.target.len(), 8);
        let mut long_prompt = Sequence { prompt: vec![BOS_ID, 5, 6, 7, 8, 9, EOS_ID], target: vec![3, EOS_ID] };
        assert!(long_prompt.truncate(4));
        assert_eq!(long_prompt.target, vec![EOS_ID]);
        assert_eq!(long_prompt.prompt.len(), 3);
        assert!(!long_prompt.clone().truncate(100));
    }

    #[test]
    fn training_reduces_loss_and_is_seeded() {
        let data: Vec<_> = (0..6).map(|i| example(&format!("x{i}"))).collect();
        let q = QuestionTemplate::default();
        let cfg = TsftConfig { learning_rate: 0.05, batch_size: 2, ..Default::default() };
        let run = || {
            let mut p = ToyPolicy::uniform(vocab());
            let before = mean_tsft_loss(&p, &data, &q, 2048).unwrap();
            let trace = train_tsft(&mut p, &data, &q, &cfg).unwrap();
            (before, mean_tsft_loss(&p, &data, &q, 2048).unwrap(), trace, p)
        };
        let (before, after, trace, p1) = run();
        assert!(after < before);
        assert_eq!(trace.epoch_losses.len(), 3);
        assert_eq!(trace.steps.len(), 9);
        assert!(trace.epoch_losses[2] < trace.epoch_losses[0]);
        let (_, _, trace2, p2) = run();
        assert_eq!(trace, trace2);
        assert_eq!(p1.params(), p2.params());
        assert!(trace.to_csv().starts_with("epoch,step,loss\n0,0,"));
    }

    #[test]
    fn gradient_matches_loss_difference() {
        let v = vocab();
        let p = ToyPolicy::random(v.clone(), 0.3, 9);
        let t = TripletExample::encode(&example("g"), &v, &QuestionTemplate::default());
        let mut grad = p.zero_table();
        accumulate_tsft_grad(&p, &t, 1.0, &mut grad);
        let (r, c) = (p.bias_row(), 3);
        let h = 1e-6;
        let bump = |d: f64| {
            let mut q = p.clone();
            let x = q.params().get(r, c);
            q.params_mut().unwrap().set(r, c, x + d);
            tsft_loss(&q, &t)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!((fd - grad.get(r, c)).abs() < 1e-6, "{fd} vs {}", grad.get(r, c));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data: Vec<_> = (0..3).map(|i| example(&format!("z{i}"))).collect();
        let q = QuestionTemplate::default();
        let start = ToyPolicy::random(vocab(), 0.5, 2);
        let mut p = start.clone();
        let before = mean_tsft_loss(&p, &data, &q, 2048).unwrap();
        let mut epochs = Vec::new();
        let cfg = TsftConfig { learning_rate: 0.0, ..Default::default() };
        train_tsft_with(&mut p, &data, &q, &cfg, |e, _| {
            epochs.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(p.params(), start.params());
        assert_eq!(mean_tsft_loss(&p, &data, &q, 2048).unwrap(), before);
        assert_eq!(epochs, vec![0, 1, 2]);
    }

    #[test]
    fn single_example_loss_falls_over_many_steps() {
        let data = vec![example("one")];
        let q = QuestionTemplate::default();
        let mut p = ToyPolicy::uniform(vocab());
        let before = mean_tsft_loss(&p, &data, &q, 2048).unwrap();
        let cfg = TsftConfig { epochs: 200, ..Default::default() };
        train_tsft(&mut p, &data, &q, &cfg).unwrap();
        assert!(mean_tsft_loss(&p, &data, &q, 2048).unwrap() < before);
    }

    #[test]
    fn divergence_is_reported() {
        let data = vec![example("boom")];
        let mut p = ToyPolicy::uniform(vocab());
        let cfg = TsftConfig { learning_rate: 1e308, optimizer: OptimizerConfig { kind: "sgd".into(), ..Default::default() }, ..Default::default() };
        let err = train_tsft(&mut p, &data, &QuestionTemplate::default(), &cfg).unwrap_err();
        assert!(matches!(err, TsftError::NonFinite { pair_id, .. } if pair_id == "boom"));
    }
}
