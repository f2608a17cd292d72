use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use super::{BackendError, GenerationBackend, GenerationRequest, GenerationResult};

/// Returns the user prompt unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl GenerationBackend for EchoBackend {
    fn name(&self) -> &str {
        "echo"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        Ok(GenerationResult::stop(request.user_prompt.clone()))
    }
}

type Script = dyn Fn(&GenerationRequest, usize) -> Result<String, BackendError> + Send + Sync;

/// Answers from a closure given the request and the 0-based call index.
pub struct FnBackend {
    script: Box<Script>,
    calls: AtomicUsize,
}

impl FnBackend {
    pub fn new(script: impl Fn(&GenerationRequest, usize) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self { script: Box::new(script), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl GenerationBackend for FnBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(request, call).map(GenerationResult::stop)
    }
}

/// Wraps a backend, holding each call for `delay` and recording the peak
/// number of concurrent calls.
pub struct InstrumentedBackend<B> {
    inner: B,
    delay: Duration,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl<B: GenerationBackend> InstrumentedBackend<B> {
    pub fn new(inner: B, delay: Duration) -> Self {
        Self { inner, delay, in_flight: AtomicUsize::new(0), max_in_flight: AtomicUsize::new(0) }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: GenerationBackend> GenerationBackend for InstrumentedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn endpoint(&self) -> String {
        self.inner.endpoint()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        thread::sleep(self.delay);
        let out = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
