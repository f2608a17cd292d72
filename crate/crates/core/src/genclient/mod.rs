//! Generation backends for the teacher model.
//!
//! A backend performs a single chat-completion attempt; [`generate`] wraps it
//! with retry and exponential backoff, and [`generate_batch`] fans requests
//! out over a bounded number of worker threads. Backends are registered by
//! name in a [`BackendRegistry`] and selected at runtime.

mod http;
mod mock;
mod registry;

pub use http::{ChatCompletionRequest, ChatMessage, OpenAiBackend, CHAT_COMPLETIONS_PATH};
pub use mock::{EchoBackend, FnBackend, InstrumentedBackend};
pub use registry::{BackendConfig, BackendFactory, BackendRegistry, RegistryError};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::toymodel::count_tokens;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 2048;
pub const DEFAULT_MAX_PROMPT_TOKENS: usize = 8192;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Empty means "the backend's configured model".
    pub model_name: String,
}

impl GenerationRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            model_name: String::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Combined prompt length under the toy tokenizer estimate.
    pub fn prompt_tokens(&self) -> usize {
        count_tokens(&self.system_prompt) + count_tokens(&self.user_prompt)
    }

    /// Checks the request against generation limits.
    pub fn validate(&self, max_new_tokens: usize, max_prompt_tokens: usize) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} must be non-negative", self.temperature));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > max_new_tokens {
            return Err(format!("max_new_tokens {} outside 1..={max_new_tokens}", self.max_new_tokens));
        }
        let n = self.prompt_tokens();
        if n > max_prompt_tokens {
            return Err(format!("prompt has ~{n} tokens, limit is {max_prompt_tokens}"));
        }
        Ok(())
    }

    /// Stable identifier derived from the request contents, used to replay
    /// failed calls.
    pub fn request_id(&self) -> String {
        let body = serde_json::to_vec(self).expect("request serializes");
        hex::encode(&Sha256::digest(body)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    /// Attempts spent, including the successful one.
    pub attempts: u32,
}

impl GenerationResult {
    pub fn stop(text: impl Into<String>) -> Self {
        Self { text: text.into(), finish_reason: FinishReason::Stop, latency_ms: 0, attempts: 1 }
    }
}

/// Failure of a single attempt.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Network failures, 5xx and 429 are retried.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Network(_) => true,
            BackendError::Status { code, .. } => *code >= 500 || *code == 429,
            BackendError::Malformed(_) | BackendError::InvalidRequest(_) => false,
        }
    }
}

/// Terminal failure of a request after retries.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("request {request_id} to {endpoint} failed after {attempts} attempt(s): {source}")]
pub struct GenError {
    pub request_id: String,
    pub endpoint: String,
    pub attempts: u32,
    pub source: BackendError,
}

pub trait GenerationBackend: Send + Sync {
    /// Registry name of the backend kind.
    fn name(&self) -> &str;

    /// Where requests go; reported in errors.
    fn endpoint(&self) -> String {
        self.name().to_string()
    }

    /// One attempt, no retries.
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_millis(500), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Same attempt budget, no sleeping. For tests and offline mocks.
    pub fn immediate() -> Self {
        Self { base_delay: Duration::ZERO, ..Self::default() }
    }

    /// Delay before attempt `attempt + 1`, given `attempt >= 1` already failed.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

/// Runs one request with retries on transient failures.
pub fn generate(
    request: &GenerationRequest,
    backend: &dyn GenerationBackend,
    retry: &RetryPolicy,
) -> Result<GenerationResult, GenError> {
    let max_attempts = retry.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        let started = Instant::now();
        match backend.complete(request) {
            Ok(mut result) => {
                result.latency_ms = started.elapsed().as_millis() as u64;
                result.attempts = attempt;
                if attempt > 1 {
                    log::info!("request {} succeeded after {attempt} attempts", request.request_id());
                }
                return Ok(result);
            }
            Err(err) if err.is_transient() && attempt < max_attempts => {
                let delay = retry.delay_after(attempt);
                log::warn!(
                    "request {} attempt {attempt}/{max_attempts} failed ({err}); retrying in {delay:?}",
                    request.request_id()
                );
                thread::sleep(delay);
            }
            Err(source) => {
                return Err(GenError {
                    request_id: request.request_id(),
                    endpoint: backend.endpoint(),
                    attempts: attempt,
                    source,
                })
            }
        }
    }
}

/// Runs requests with at most `parallelism` in flight. Output `i` always
/// answers request `i`; one failure does not cancel the rest.
pub fn generate_batch(
    requests: &[GenerationRequest],
    backend: &dyn GenerationBackend,
    parallelism: usize,
    retry: &RetryPolicy,
) -> Vec<Result<GenerationResult, GenError>> {
    let workers = parallelism.max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| generate(r, backend, retry)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GenerationResult, GenError>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(request) = requests.get(i) else { break };
                let result = generate(request, backend, retry);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every request produced a result"))
        .collect()
}
