//! OpenAI-compatible HTTP backend: `/chat/completions` and `/embeddings`.
//!
//! Every model the pipeline targets (hosted or self-served) is reachable
//! through this wire shape. The API key is resolved from the configured
//! environment variable at call time, so cache-only reruns need no
//! credentials.

use serde::Deserialize;
use serde_json::json;

use super::{BackendChat, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, FinishReason, GatewayConfig, GatewayError};

pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    api_key_env: String,
}

impl HttpBackend {
    pub fn new(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base_url: cfg.endpoint_url.trim_end_matches('/').to_string(),
            api_key_env: cfg.api_key_env.clone(),
        })
    }

    fn auth_header(&self) -> Result<Option<String>, BackendError> {
        if self.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.api_key_env) {
            Ok(key) if !key.is_empty() => Ok(Some(format!("Bearer {key}"))),
            _ => Err(BackendError::Rejected(format!(
                "environment variable `{}` is unset or empty",
                self.api_key_env
            ))),
        }
    }

    async fn post(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> Result<serde_json::Value, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.client.post(&url).json(&body);
        if let Some(auth) = self.auth_header()? {
            req = req.header("Authorization", auth);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| BackendError::Transient(format!("request to {url}: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| BackendError::Transient(format!("reading body from {url}: {e}")))?;
        if status.is_success() {
            serde_json::from_str(&text)
                .map_err(|e| BackendError::Transient(format!("invalid JSON from {url}: {e}")))
        } else if status.as_u16() == 429 || status.is_server_error() || status.as_u16() == 408 {
            Err(BackendError::Transient(format!("{url} returned {status}: {text}")))
        } else {
            Err(BackendError::Rejected(format!("{url} returned {status}: {text}")))
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Usage,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingList {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

#[async_trait::async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendChat, BackendError> {
        let mut messages = Vec::new();
        if !req.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": req.user_prompt}));
        let body = json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let value = self.post("/chat/completions", body).await?;
        let parsed: ChatCompletion = serde_json::from_value(value)
            .map_err(|e| BackendError::Transient(format!("unexpected completion shape: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transient("completion had no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(BackendChat {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            prompt_tokens: parsed.usage.prompt_tokens,
            completion_tokens: parsed.usage.completion_tokens,
        })
    }
}

#[async_trait::async_trait]
impl EmbeddingBackend for HttpBackend {
    async fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({"model": model_id, "input": texts});
        let value = self.post("/embeddings", body).await?;
        let parsed: EmbeddingList = serde_json::from_value(value)
            .map_err(|e| BackendError::Transient(format!("unexpected embeddings shape: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Transient(format!(
                "embeddings response had {} rows for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        let mut rows = parsed.data;
        rows.sort_by_key(|d| d.index);
        Ok(rows.into_iter().map(|d| d.embedding).collect())
    }
}
