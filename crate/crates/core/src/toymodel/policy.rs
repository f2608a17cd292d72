use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::vocab::{TokenId, Vocab, BOS_ID, EOS_ID};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy is frozen; parameter updates are rejected")]
    Frozen,
    #[error("parameter table is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
}

/// Dense row-major table of reals. Used for both parameters and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ParamTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamTable, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "table shapes differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z - lse).collect()
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// Bag of the prompt's content tokens (BOS/EOS excluded), sorted by token
/// id. `mean` holds relative frequencies; `presence` holds a 1 for every
/// distinct token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFeatures {
    mean: Vec<(TokenId, f64)>,
    presence: Vec<(TokenId, f64)>,
}

impl PromptFeatures {
    pub fn new(prompt: &[TokenId]) -> Self {
        let mut ids: Vec<TokenId> = prompt.iter().copied().filter(|&t| t != BOS_ID && t != EOS_ID).collect();
        let n = ids.len() as f64;
        ids.sort_unstable();
        let mut mean: Vec<(TokenId, f64)> = Vec::new();
        for id in ids {
            match mean.last_mut() {
                Some((last, c)) if *last == id => *c += 1.0,
                _ => mean.push((id, 1.0)),
            }
        }
        let presence = mean.iter().map(|&(t, _)| (t, 1.0)).collect();
        for (_, c) in &mut mean {
            *c /= n;
        }
        Self { mean, presence }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.mean
    }

    pub fn presence(&self) -> &[(TokenId, f64)] {
        &self.presence
    }
}

/// Log-linear next-token model over a fixed vocab.
///
/// The logit for token `v` at step `t` is
/// `W[prev, v] + sum_f bag_f * W[V + f, v] + W[2V, v]`, plus
/// `sum_f [f in prompt] * W[2V + 1 + f, v]` at `t = 0` only: a
/// previous-token row, the mean-pooled prompt bag, a bias row, and a
/// presence bag that conditions the first token (the verdict) without being
/// shared with the rest of the answer. The parameter table has `3V + 1` rows
/// and `V` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocab,
    params: ParamTable,
    frozen: bool,
}

impl ToyPolicy {
    /// All-zero parameters: every next-token distribution is uniform.
    pub fn uniform(vocab: Vocab) -> Self {
        let v = vocab.len();
        Self { params: ParamTable::zeros(3 * v + 1, v), vocab, frozen: false }
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: Vocab, scale: f64, seed: u64) -> Self {
        let mut policy = Self::uniform(vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in policy.params.as_mut_slice() {
            *x = rng.gen_range(-scale..=scale);
        }
        policy
    }

    pub fn from_params(vocab: Vocab, params: ParamTable, frozen: bool) -> Result<Self, PolicyError> {
        let (rows, cols) = Self::shape_for(vocab.len());
        if params.rows() != rows || params.cols() != cols {
            return Err(PolicyError::Shape { rows, cols, got_rows: params.rows(), got_cols: params.cols() });
        }
        Ok(Self { vocab, params, frozen })
    }

    pub fn shape_for(vocab_len: usize) -> (usize, usize) {
        (3 * vocab_len + 1, vocab_len)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_table(&self) -> ParamTable {
        ParamTable::zeros(self.params.rows(), self.params.cols())
    }

    pub fn prev_row(&self, token: TokenId) -> usize {
        token as usize
    }

    pub fn prompt_row(&self, token: TokenId) -> usize {
        self.vocab.len() + token as usize
    }

    pub fn bias_row(&self) -> usize {
        2 * self.vocab.len()
    }

    pub fn lead_row(&self, token: TokenId) -> usize {
        2 * self.vocab.len() + 1 + token as usize
    }

    /// Bias plus pooled-prompt contribution shared by every step, and the
    /// same with the first-step rows added.
    fn context_logits(&self, features: &PromptFeatures) -> (Vec<f64>, Vec<f64>) {
        let mut ctx = self.params.row(self.bias_row()).to_vec();
        for &(tok, w) in features.entries() {
            for (c, p) in ctx.iter_mut().zip(self.params.row(self.prompt_row(tok))) {
                *c += w * p;
            }
        }
        let mut lead = ctx.clone();
        for &(tok, w) in features.presence() {
            for (c, p) in lead.iter_mut().zip(self.params.row(self.lead_row(tok))) {
                *c += w * p;
            }
        }
        (ctx, lead)
    }

    fn context_at(ctx: &(Vec<f64>, Vec<f64>), step: usize) -> &[f64] {
        if step == 0 {
            &ctx.1
        } else {
            &ctx.0
        }
    }

    fn step_logits(&self, ctx: &[f64], prev: TokenId) -> Vec<f64> {
        ctx.iter().zip(self.params.row(self.prev_row(prev))).map(|(a, b)| a + b).collect()
    }

    /// Next-token log-distribution at `step` given the prompt and the
    /// previous token.
    pub fn next_token_log_probs(&self, prompt: &[TokenId], step: usize, prev: TokenId) -> Vec<f64> {
        let ctx = self.context_logits(&PromptFeatures::new(prompt));
        log_softmax(&self.step_logits(Self::context_at(&ctx, step), prev))
    }

    fn check_completion(completion: &[TokenId]) {
        assert!(
            completion.last() == Some(&EOS_ID),
            "completion must be non-empty and end with EOS"
        );
    }

    /// `sum_t log p(y_t | y_{t-1}, prompt)` with `y_0 = BOS`.
    ///
    /// # Panics
    /// If `completion` is empty or does not end with EOS.
    pub fn log_prob(&self, prompt: &[TokenId], completion: &[TokenId]) -> f64 {
        Self::check_completion(completion);
        let ctx = self.context_logits(&PromptFeatures::new(prompt));
        let mut prev = BOS_ID;
        let mut total = 0.0;
        for (t, &y) in completion.iter().enumerate() {
            total += log_softmax(&self.step_logits(Self::context_at(&ctx, t), prev))[y as usize];
            prev = y;
        }
        total
    }

    /// Adds `scale * d log_prob / d params` into `grad` and returns the
    /// log-probability.
    pub fn accumulate_grad_log_prob(
        &self,
        prompt: &[TokenId],
        completion: &[TokenId],
        scale: f64,
        grad: &mut ParamTable,
    ) -> f64 {
        Self::check_completion(completion);
        let features = PromptFeatures::new(prompt);
        let ctx = self.context_logits(&features);
        let v = self.vocab.len();
        // residual summed over steps; every step shares the context rows
        let mut ctx_residual = vec![0.0; v];
        let mut lead_residual = vec![0.0; v];
        let mut prev = BOS_ID;
        let mut total = 0.0;
        for (t, &y) in completion.iter().enumerate() {
            let mut probs = self.step_logits(Self::context_at(&ctx, t), prev);
            let lp = log_softmax(&probs)[y as usize];
            total += lp;
            softmax_in_place(&mut probs);
            let row = grad.row_mut(self.prev_row(prev));
            for (k, p) in probs.iter().enumerate() {
                let r = if k == y as usize { 1.0 - p } else { -p };
                row[k] += scale * r;
                ctx_residual[k] += r;
                if t == 0 {
                    lead_residual[k] = r;
                }
            }
            prev = y;
        }
        let bias = self.bias_row();
        for (g, r) in grad.row_mut(bias).iter_mut().zip(&ctx_residual) {
            *g += scale * r;
        }
        for &(tok, w) in features.entries() {
            let row = self.prompt_row(tok);
            for (g, r) in grad.row_mut(row).iter_mut().zip(&ctx_residual) {
                *g += scale * w * r;
            }
        }
        for &(tok, w) in features.presence() {
            let row = self.lead_row(tok);
            for (g, r) in grad.row_mut(row).iter_mut().zip(&lead_residual) {
                *g += scale * w * r;
            }
        }
        total
    }

    /// Exact gradient of [`ToyPolicy::log_prob`] with respect to the parameters.
    pub fn grad_log_prob(&self, prompt: &[TokenId], completion: &[TokenId]) -> ParamTable {
        let mut grad = self.zero_table();
        self.accumulate_grad_log_prob(prompt, completion, 1.0, &mut grad);
        grad
    }

    /// Decodes up to `max_new_tokens`, stopping after EOS (which is kept).
    /// Temperature 0 is greedy with lowest-index tie-break; otherwise tokens
    /// are sampled from the tempered distribution with a seeded generator.
    pub fn generate(&self, prompt: &[TokenId], temperature: f64, max_new_tokens: usize, seed: u64) -> Vec<TokenId> {
        let ctx = self.context_logits(&PromptFeatures::new(prompt));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut prev = BOS_ID;
        while out.len() < max_new_tokens {
            let mut logits = self.step_logits(Self::context_at(&ctx, out.len()), prev);
            let next = if temperature <= 0.0 {
                argmax(&logits)
            } else {
                logits.iter_mut().for_each(|z| *z /= temperature);
                softmax_in_place(&mut logits);
                sample(&logits, rng.gen::<f64>())
            } as TokenId;
            out.push(next);
            if next == EOS_ID {
                break;
            }
            prev = next;
        }
        out
    }

    /// Deep copy that rejects all further updates.
    pub fn clone_frozen(&self) -> Self {
        Self { frozen: true, ..self.clone() }
    }

    /// `params += scale * delta`.
    pub fn apply_update(&mut self, delta: &ParamTable, scale: f64) -> Result<(), PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        self.params.add_scaled(delta, scale);
        Ok(())
    }

    /// Direct parameter access for hand-built fixtures.
    pub fn params_mut(&mut self) -> Result<&mut ParamTable, PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        Ok(&mut self.params)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
