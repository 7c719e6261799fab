//! Blocking HTTP clients for OpenAI-compatible chat and embedding endpoints.
//!
//! The API key is read from `SITQA_API_KEY` only. When unset, requests go out
//! without an `Authorization` header, which suits local model servers.

use std::time::Duration;

use log::{debug, warn};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use sitqa_core::embedding::{Embedding, EmbeddingProvider};
use sitqa_core::provider::{ChatProvider, CompletionParams, Message, ProviderError};

pub const API_KEY_ENV: &str = "SITQA_API_KEY";

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    client: Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    debug_bodies: bool,
}

impl HttpClient {
    fn new(retry: RetryPolicy, debug_bodies: bool) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(HttpClient {
            client,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry,
            debug_bodies,
        })
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, ProviderError> {
        if self.debug_bodies {
            debug!("POST {url} request: {body}");
        }
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp
                        .text()
                        .map_err(|e| ProviderError::Transport(e.to_string()))?;
                    if self.debug_bodies {
                        debug!("POST {url} response {status}: {text}");
                    }
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|e| ProviderError::BadResponse(format!("invalid JSON: {e}")));
                    }
                    let retryable =
                        status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error();
                    let err = ProviderError::Transport(format!(
                        "HTTP {status}: {}",
                        truncate(&text, 200)
                    ));
                    if !retryable {
                        return Err(err);
                    }
                    err
                }
                Err(e) => ProviderError::Transport(e.to_string()),
            };
            if attempt >= self.retry.max_retries {
                return Err(outcome);
            }
            let delay = self.retry.base_delay * 2u32.pow(attempt);
            warn!("{outcome}; retrying in {delay:?}");
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn endpoint_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

pub struct HttpChatProvider {
    http: HttpClient,
    url: String,
}

impl HttpChatProvider {
    /// `base` is the API root, e.g. `http://localhost:8000/v1`.
    pub fn new(base: &str, retry: RetryPolicy, debug_bodies: bool) -> Result<Self, ProviderError> {
        Ok(HttpChatProvider {
            http: HttpClient::new(retry, debug_bodies)?,
            url: endpoint_url(base, "chat/completions"),
        })
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete(
        &mut self,
        conversation: &[Message],
        params: &CompletionParams,
    ) -> Result<String, ProviderError> {
        let mut body = json!({
            "model": params.model_id,
            "messages": conversation,
            "temperature": params.temperature,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.http.post(&self.url, &body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::BadResponse("no choices[0].message.content".into()))
    }
}

pub struct HttpEmbeddingProvider {
    http: HttpClient,
    url: String,
    model: String,
    dim: usize,
}

impl HttpEmbeddingProvider {
    pub fn new(
        base: &str,
        model: &str,
        dim: usize,
        retry: RetryPolicy,
        debug_bodies: bool,
    ) -> Result<Self, ProviderError> {
        Ok(HttpEmbeddingProvider {
            http: HttpClient::new(retry, debug_bodies)?,
            url: endpoint_url(base, "embeddings"),
            model: model.to_string(),
            dim,
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        let resp = self
            .http
            .post(&self.url, &json!({ "model": self.model, "input": texts }))?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| ProviderError::BadResponse("no data array".into()))?;
        if data.len() != texts.len() {
            return Err(ProviderError::BadResponse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let v: Vec<f64> = serde_json::from_value(item["embedding"].clone())
                .map_err(|e| ProviderError::BadResponse(format!("embedding: {e}")))?;
            if v.len() != self.dim {
                return Err(ProviderError::BadResponse(format!(
                    "expected dimension {}, got {}",
                    self.dim,
                    v.len()
                )));
            }
            out.push(Embedding::normalized(v));
        }
        Ok(out)
    }
}
