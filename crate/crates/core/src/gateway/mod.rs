//! Uniform access to chat-completion and embedding endpoints with retries,
//! bounded concurrency, and content-addressed response caching.
//!
//! A [`Gateway`] wraps a [`ChatBackend`] plus [`EmbeddingBackend`]. Backends
//! are selected from the configured endpoint URL: `http(s)://` endpoints use
//! the OpenAI-compatible wire protocol, `scripted://` endpoints use the
//! deterministic offline providers in [`scripted`]. With caching enabled and
//! temperature 0, a full pipeline rerun issues zero upstream calls.

mod cache;
pub mod http;
pub mod scripted;
pub mod testing;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use cache::ResponseCache;

pub use http::HttpBackend;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider rejected request: {0}")]
    Config(String),
    #[error("response integrity: {0}")]
    Integrity(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("provider aborted the run")]
    Aborted,
}

impl GatewayError {
    /// Fatal errors abort a whole stage instead of producing a per-item
    /// failure placeholder.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Aborted)
    }
}

/// Backend-level failure classification. The gateway maps transient errors
/// into the retry loop and fatal ones straight to the caller.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("aborted")]
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// Model id plus sampling knobs shared by every request a stage issues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatOptions {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_max_output_tokens() -> u32 {
    1024
}

impl ChatOptions {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), temperature: 0.0, max_output_tokens: 1024 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// The system prompt may be empty (some templates are user-prompt-only);
    /// the user prompt never is.
    pub fn new(opts: &ChatOptions, system_prompt: String, user_prompt: String) -> Self {
        Self {
            model_id: opts.model_id.clone(),
            system_prompt,
            user_prompt,
            temperature: opts.temperature,
            max_output_tokens: opts.max_output_tokens,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.user_prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("user prompt is empty".into()));
        }
        if self.model_id.is_empty() {
            return Err(GatewayError::InvalidRequest("model id is empty".into()));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    /// True when the response was served from the local cache without any
    /// upstream call.
    pub cached: bool,
}

/// Raw backend completion before caching metadata is attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendChat {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

/// Unit-normalized embedding. Construction rejects zero vectors and
/// normalizes everything else, so cosine similarity is a plain dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub dims: usize,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f64>) -> Result<Self, GatewayError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Integrity("zero or non-finite embedding norm".into()));
        }
        let values: Vec<f64> = values.iter().map(|v| v / norm).collect();
        Ok(Self { model_id: model_id.into(), dims: values.len(), values })
    }
}

/// Cosine similarity of two unit-normalized vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, GatewayError> {
    if a.dims != b.dims {
        return Err(GatewayError::Integrity(format!(
            "embedding dims mismatch: {} vs {}",
            a.dims, b.dims
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Empty means no
    /// auth header (local or scripted endpoints). The key is read lazily at
    /// call time so cache-only reruns work without credentials.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub cache_dir: Option<std::path::PathBuf>,
}

fn default_concurrency() -> usize {
    8
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    250
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrency < 1 {
            return Err(GatewayError::InvalidRequest("max_concurrency must be >= 1".into()));
        }
        if self.endpoint_url.is_empty() {
            return Err(GatewayError::InvalidRequest("endpoint_url is empty".into()));
        }
        Ok(())
    }
}

/// Snapshot of gateway counters, used for manifest/token accounting.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GatewayStats {
    pub upstream_calls: u64,
    pub cache_hits: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Default)]
struct Counters {
    upstream_calls: AtomicU64,
    cache_hits: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

#[async_trait::async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendChat, BackendError>;
}

#[async_trait::async_trait]
pub trait EmbeddingBackend: Send + Sync {
    async fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;

    /// Largest batch the provider accepts per request; the gateway chunks
    /// larger inputs.
    fn max_batch(&self) -> usize {
        100
    }
}

/// Shared access point for chat and embedding calls. Cloning is cheap; all
/// clones share the limiter, cache, and counters.
#[derive(Clone)]
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embeddings: Arc<dyn EmbeddingBackend>,
    limiter: Arc<Semaphore>,
    cache: Option<Arc<ResponseCache>>,
    max_concurrency: usize,
    max_retries: u32,
    backoff_base_ms: u64,
    counters: Arc<Counters>,
}

impl Gateway {
    /// Build a gateway from config, selecting the backend by URL scheme.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let (chat, embeddings): (Arc<dyn ChatBackend>, Arc<dyn EmbeddingBackend>) =
            if cfg.endpoint_url.starts_with(scripted::URL_SCHEME) {
                let backends = scripted::ScriptedBackends::from_url(&cfg.endpoint_url)?;
                (Arc::new(backends.chat), Arc::new(backends.embeddings))
            } else if cfg.endpoint_url.starts_with("http://")
                || cfg.endpoint_url.starts_with("https://")
            {
                let backend = Arc::new(HttpBackend::new(cfg)?);
                (backend.clone(), backend)
            } else {
                return Err(GatewayError::InvalidRequest(format!(
                    "unsupported endpoint scheme in `{}` (expected http(s):// or scripted://)",
                    cfg.endpoint_url
                )));
            };
        Self::with_backends(cfg, chat, embeddings)
    }

    /// Build a gateway around explicit backends (test doubles, custom wire
    /// protocols).
    pub fn with_backends(
        cfg: &GatewayConfig,
        chat: Arc<dyn ChatBackend>,
        embeddings: Arc<dyn EmbeddingBackend>,
    ) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let cache = match &cfg.cache_dir {
            Some(dir) => Some(Arc::new(
                ResponseCache::open(dir).map_err(|e| GatewayError::Cache(e.to_string()))?,
            )),
            None => None,
        };
        Ok(Self {
            chat,
            embeddings,
            limiter: Arc::new(Semaphore::new(cfg.max_concurrency)),
            cache,
            max_concurrency: cfg.max_concurrency,
            max_retries: cfg.max_retries,
            backoff_base_ms: cfg.backoff_base_ms,
            counters: Arc::new(Counters::default()),
        })
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            upstream_calls: self.counters.upstream_calls.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            prompt_tokens: self.counters.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.counters.completion_tokens.load(Ordering::Relaxed),
        }
    }

    /// Complete a chat request, serving from cache when possible.
    pub async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete_opts(req, false).await
    }

    /// `bypass_cache` skips the cache read (used for one-shot retries after
    /// a parse failure) but still records the fresh response.
    pub async fn complete_opts(
        &self,
        req: &ChatRequest,
        bypass_cache: bool,
    ) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let key = cache::chat_key(req);
        if !bypass_cache {
            if let Some(cache) = &self.cache {
                if let Some(hit) = cache
                    .load::<cache::CachedChat>(&key)
                    .map_err(|e| GatewayError::Cache(e.to_string()))?
                {
                    self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(ChatResponse {
                        text: hit.text,
                        finish_reason: hit.finish_reason,
                        cached: true,
                    });
                }
            }
        }
        let raw = self.call_with_retry(req).await?;
        self.counters.prompt_tokens.fetch_add(raw.prompt_tokens, Ordering::Relaxed);
        self.counters.completion_tokens.fetch_add(raw.completion_tokens, Ordering::Relaxed);
        if let Some(cache) = &self.cache {
            cache
                .store(
                    &key,
                    &cache::CachedChat { text: raw.text.clone(), finish_reason: raw.finish_reason },
                )
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        Ok(ChatResponse { text: raw.text, finish_reason: raw.finish_reason, cached: false })
    }

    async fn call_with_retry(&self, req: &ChatRequest) -> Result<BackendChat, GatewayError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let _permit = self.limiter.acquire().await.expect("limiter never closed");
            self.counters.upstream_calls.fetch_add(1, Ordering::Relaxed);
            match self.chat.complete(req).await {
                Ok(resp) => return Ok(resp),
                Err(BackendError::Aborted) => return Err(GatewayError::Aborted),
                Err(BackendError::Rejected(msg)) => return Err(GatewayError::Config(msg)),
                Err(BackendError::Transient(msg)) => {
                    if attempts > self.max_retries {
                        return Err(GatewayError::Transport { attempts, message: msg });
                    }
                    drop(_permit);
                    tokio::time::sleep(self.backoff_delay(attempts)).await;
                }
            }
        }
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt - 1).min(6);
        Duration::from_millis((self.backoff_base_ms.saturating_mul(factor)).min(30_000))
    }

    /// Embed a batch of texts, preserving input order. Each text is cached
    /// independently; misses are chunked to the provider batch limit.
    pub async fn embed_batch(
        &self,
        model_id: &str,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("embed_batch on empty input".into()));
        }
        if model_id.is_empty() {
            return Err(GatewayError::InvalidRequest("embedding model id is empty".into()));
        }
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut misses: Vec<usize> = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = cache::embed_key(model_id, text);
            if let Some(cache) = &self.cache {
                if let Some(hit) = cache
                    .load::<cache::CachedEmbedding>(&key)
                    .map_err(|e| GatewayError::Cache(e.to_string()))?
                {
                    self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                    out[i] = Some(EmbeddingVector {
                        model_id: model_id.to_string(),
                        dims: hit.values.len(),
                        values: hit.values,
                    });
                    continue;
                }
            }
            misses.push(i);
        }
        for chunk in misses.chunks(self.embeddings.max_batch().max(1)) {
            let chunk_texts: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
            let raw = self.embed_with_retry(model_id, &chunk_texts).await?;
            if raw.len() != chunk_texts.len() {
                return Err(GatewayError::Integrity(format!(
                    "embedding count mismatch: asked {} got {}",
                    chunk_texts.len(),
                    raw.len()
                )));
            }
            for (&i, values) in chunk.iter().zip(raw) {
                let vector = EmbeddingVector::new(model_id, values)?;
                if let Some(cache) = &self.cache {
                    cache
                        .store(
                            &cache::embed_key(model_id, &texts[i]),
                            &cache::CachedEmbedding { values: vector.values.clone() },
                        )
                        .map_err(|e| GatewayError::Cache(e.to_string()))?;
                }
                out[i] = Some(vector);
            }
        }
        let vectors: Vec<EmbeddingVector> =
            out.into_iter().map(|v| v.expect("every slot filled")).collect();
        let dims = vectors[0].dims;
        if let Some(bad) = vectors.iter().find(|v| v.dims != dims) {
            return Err(GatewayError::Integrity(format!(
                "embedding dims mismatch within batch: {} vs {}",
                dims, bad.dims
            )));
        }
        Ok(vectors)
    }

    async fn embed_with_retry(
        &self,
        model_id: &str,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, GatewayError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let _permit = self.limiter.acquire().await.expect("limiter never closed");
            self.counters.upstream_calls.fetch_add(1, Ordering::Relaxed);
            match self.embeddings.embed(model_id, texts).await {
                Ok(resp) => return Ok(resp),
                Err(BackendError::Aborted) => return Err(GatewayError::Aborted),
                Err(BackendError::Rejected(msg)) => return Err(GatewayError::Config(msg)),
                Err(BackendError::Transient(msg)) => {
                    if attempts > self.max_retries {
                        return Err(GatewayError::Transport { attempts, message: msg });
                    }
                    drop(_permit);
                    tokio::time::sleep(self.backoff_delay(attempts)).await;
                }
            }
        }
    }
}
