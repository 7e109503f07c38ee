//! Test doubles for the gateway traits: closure-backed providers, call
//! counters, and a concurrency probe. Kept in the library (not behind
//! `cfg(test)`) so downstream crates can exercise their pipelines against
//! scripted behavior.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::{BackendChat, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, FinishReason};

type ChatFn = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Chat backend driven by a closure from request to response text.
pub struct FnChat {
    f: Box<ChatFn>,
}

impl FnChat {
    pub fn new(
        f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self { f: Box::new(f) }
    }

    /// Echoes the user prompt back.
    pub fn echo() -> Self {
        Self::new(|req| Ok(req.user_prompt.clone()))
    }
}

#[async_trait::async_trait]
impl ChatBackend for FnChat {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendChat, BackendError> {
        let text = (self.f)(req)?;
        Ok(BackendChat {
            prompt_tokens: req.user_prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
            finish_reason: FinishReason::Stop,
        })
    }
}

type EmbedFn = dyn Fn(&str, &[String]) -> Result<Vec<Vec<f64>>, BackendError> + Send + Sync;

/// Embedding backend driven by a closure; `max_batch` is adjustable to test
/// chunking.
pub struct FnEmbed {
    f: Box<EmbedFn>,
    pub max_batch: usize,
}

impl FnEmbed {
    pub fn new(
        f: impl Fn(&str, &[String]) -> Result<Vec<Vec<f64>>, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self { f: Box::new(f), max_batch: 100 }
    }

    /// Every text embeds to the same axis vector of the given dimension.
    pub fn identity(dims: usize) -> Self {
        Self::new(move |_, texts| {
            Ok(texts
                .iter()
                .map(|_| {
                    let mut v = vec![0.0; dims];
                    v[0] = 1.0;
                    v
                })
                .collect())
        })
    }
}

#[async_trait::async_trait]
impl EmbeddingBackend for FnEmbed {
    async fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (self.f)(model_id, texts)
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }
}

/// Wraps a chat backend and counts invocations.
pub struct CountingChat<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B> CountingChat<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait::async_trait]
impl<B: ChatBackend> ChatBackend for CountingChat<B> {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendChat, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req).await
    }
}

/// Records the high-water mark of concurrent in-flight calls. A small sleep
/// keeps calls overlapping so the probe actually observes contention.
pub struct ProbeChat {
    delay: Duration,
    in_flight: Arc<AtomicUsize>,
    high_water: Arc<AtomicUsize>,
}

impl ProbeChat {
    pub fn new(delay: Duration) -> Self {
        Self {
            delay,
            in_flight: Arc::new(AtomicUsize::new(0)),
            high_water: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

#[async_trait::async_trait]
impl ChatBackend for ProbeChat {
    async fn complete(&self, _req: &ChatRequest) -> Result<BackendChat, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        tokio::time::sleep(self.delay).await;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(BackendChat {
            text: "ok".into(),
            finish_reason: FinishReason::Stop,
            prompt_tokens: 1,
            completion_tokens: 1,
        })
    }
}
