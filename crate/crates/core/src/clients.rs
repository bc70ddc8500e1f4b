//! HTTP clients for remote embedding and completion services.
//!
//! Every response goes through a content-addressed [`ResponseCache`] on disk,
//! so a warmed cache replays an experiment with the network disabled
//! (`offline`). Two wire styles are supported: the minimal sidecar schema
//! (`/embed`, `/rewrite`, `/health`) and the OpenAI-compatible REST API.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attacks::{CompletionRequest, RewriteClient};
use crate::embedding::{EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::util::{sha256_hex, write_atomic};

/// Longest single backoff sleep, whatever the server asks for.
const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{endpoint} returned HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        endpoint: String,
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("{endpoint} unreachable after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint} returned an empty response")]
    EmptyResponse { endpoint: String },
    #[error("offline mode: no cached response for {endpoint} (key {key})")]
    CacheMiss { endpoint: String, key: String },
    #[error("malformed response from {endpoint}: {message}")]
    Malformed { endpoint: String, message: String },
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `POST /embed`, `POST /rewrite`, `GET /health`.
    #[default]
    Minimal,
    /// `POST /embeddings`, `POST /chat/completions`.
    #[serde(rename = "openai")]
    OpenAi,
}

/// Connection settings for one remote service. Holds the *name* of the
/// environment variable with the key, never the key itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub base_url: String,
    pub api_style: ApiStyle,
    pub api_key_env_var: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    pub backoff_base_ms: u64,
    pub max_batch_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8765".into(),
            api_style: ApiStyle::Minimal,
            api_key_env_var: None,
            model_name: "default".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            max_concurrent_requests: 4,
            backoff_base_ms: 250,
            max_batch_size: 64,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(ClientError::Config(format!(
                "base_url `{}` must start with http:// or https://",
                self.base_url
            )));
        }
        if self.model_name.trim().is_empty() {
            return Err(ClientError::Config("model_name must not be empty".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(ClientError::Config("max_concurrent_requests must be at least 1".into()));
        }
        if self.max_batch_size == 0 {
            return Err(ClientError::Config("max_batch_size must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(ClientError::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// An API key. Never printed, never serialized.
#[derive(Clone)]
struct Secret(String);

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

/// One stored response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub endpoint: String,
    pub model_name: String,
    pub request: Value,
    pub body: Value,
    pub created_at: u64,
}

/// Append-only, content-addressed response store at
/// `<root>/<first two hex digits>/<digest>.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Digest of `(endpoint, model, request)`. `serde_json` keeps object keys
    /// sorted, so the serialization is canonical.
    pub fn key(endpoint: &str, model_name: &str, request: &Value) -> String {
        let body = serde_json::to_string(request).expect("JSON values always serialize");
        sha256_hex(format!("{endpoint}\n{model_name}\n{body}").as_bytes())
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn load(&self, key: &str) -> Result<Option<CacheEntry>, ClientError> {
        let path = self.path_for(key);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| {
                ClientError::Cache(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}: {e}", path.display()),
                ))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores `entry` unless its key is already present; existing entries are
    /// never rewritten.
    pub fn store(&self, entry: &CacheEntry) -> Result<(), ClientError> {
        let path = self.path_for(&entry.key);
        if path.exists() {
            return Ok(());
        }
        let bytes = serde_json::to_vec_pretty(entry).expect("cache entries always serialize");
        write_atomic(&path, &bytes)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        let Ok(dirs) = std::fs::read_dir(&self.root) else {
            return 0;
        };
        dirs.flatten()
            .filter_map(|d| std::fs::read_dir(d.path()).ok())
            .map(|files| {
                files
                    .flatten()
                    .filter(|f| f.path().extension().is_some_and(|e| e == "json"))
                    .count()
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.released.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.released.notify_one();
    }
}

/// Exponential backoff with full jitter: `base * 2^(attempt-1) + U(0, base)`.
/// A `Retry-After` hint, when present, wins if it is longer.
pub fn backoff_delay(base_ms: u64, attempt: u32, retry_after: Option<Duration>, jitter: f64) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << attempt.saturating_sub(1).min(20));
    let jittered =
        Duration::from_millis(exp) + Duration::from_secs_f64(base_ms as f64 / 1000.0 * jitter.clamp(0.0, 1.0));
    let delay = match retry_after {
        Some(hint) if hint > jittered => hint,
        _ => jittered,
    };
    delay.min(MAX_BACKOFF)
}

fn parse_retry_after(value: &str) -> Option<Duration> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| *s >= 0.0)
        .map(Duration::from_secs_f64)
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Client for one remote service, usable as both an embedder and a rewriter.
#[derive(Debug)]
pub struct RemoteClient {
    config: ServiceConfig,
    http: reqwest::blocking::Client,
    api_key: Option<Secret>,
    cache: ResponseCache,
    offline: bool,
    provider_id: String,
    in_flight: Semaphore,
    network_calls: Mutex<u64>,
}

impl RemoteClient {
    /// Reads the API key from the configured environment variable (if any).
    /// In offline mode a missing key is tolerated since nothing is sent.
    pub fn new(config: ServiceConfig, cache: ResponseCache, offline: bool) -> Result<Self, ClientError> {
        config.validate()?;
        let api_key = match &config.api_key_env_var {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(Secret(v)),
                _ if offline => None,
                _ => return Err(ClientError::MissingApiKey(var.clone())),
            },
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let style = match config.api_style {
            ApiStyle::Minimal => "minimal",
            ApiStyle::OpenAi => "openai",
        };
        Ok(Self {
            provider_id: format!("remote-{style}:{}", config.model_name),
            in_flight: Semaphore::new(config.max_concurrent_requests),
            config,
            http,
            api_key,
            cache,
            offline,
            network_calls: Mutex::new(0),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Requests actually sent over the network (retries included).
    pub fn network_calls(&self) -> u64 {
        *self.network_calls.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// `GET /health` on the minimal schema.
    pub fn health(&self) -> Result<(), ClientError> {
        let endpoint = "health";
        let body = self.send(endpoint, None)?;
        match body.get("status").and_then(Value::as_str) {
            Some("ok") => Ok(()),
            _ => Err(ClientError::Malformed {
                endpoint: endpoint.into(),
                message: format!("expected {{\"status\":\"ok\"}}, got {body}"),
            }),
        }
    }

    fn embed_endpoint(&self) -> &'static str {
        match self.config.api_style {
            ApiStyle::Minimal => "embed",
            ApiStyle::OpenAi => "embeddings",
        }
    }

    fn embed_request(&self, texts: &[&str]) -> Value {
        match self.config.api_style {
            ApiStyle::Minimal => json!({ "texts": texts }),
            ApiStyle::OpenAi => json!({ "model": self.config.model_name, "input": texts }),
        }
    }

    fn complete_endpoint(&self) -> &'static str {
        match self.config.api_style {
            ApiStyle::Minimal => "rewrite",
            ApiStyle::OpenAi => "chat/completions",
        }
    }

    fn complete_request(&self, prompt: &str) -> Value {
        match self.config.api_style {
            ApiStyle::Minimal => json!({ "prompt": prompt }),
            ApiStyle::OpenAi => json!({
                "model": self.config.model_name,
                "messages": [{ "role": "user", "content": prompt }],
                "temperature": 0,
            }),
        }
    }

    /// Request parameters worth stamping into run metadata.
    pub fn request_parameters(&self) -> Value {
        json!({
            "api_style": self.config.api_style,
            "model_name": self.config.model_name,
            "temperature": match self.config.api_style {
                ApiStyle::Minimal => Value::Null,
                ApiStyle::OpenAi => json!(0),
            },
        })
    }

    /// Sends one request with retries. `None` means GET.
    fn send(&self, endpoint: &str, request: Option<&Value>) -> Result<Value, ClientError> {
        let url = self.config.url(endpoint);
        let attempts_allowed = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.in_flight.acquire();
                *self.network_calls.lock().unwrap_or_else(|e| e.into_inner()) += 1;
                let mut builder = match request {
                    Some(body) => self.http.post(&url).json(body),
                    None => self.http.get(&url),
                };
                if let Some(key) = &self.api_key {
                    builder = builder.bearer_auth(&key.0);
                }
                builder.send()
            };
            let retry_after;
            match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    retry_after = resp
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(parse_retry_after);
                    let text = resp.text().map_err(|e| ClientError::Transport {
                        endpoint: endpoint.into(),
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    if status.is_success() {
                        if text.trim().is_empty() {
                            return Err(ClientError::EmptyResponse {
                                endpoint: endpoint.into(),
                            });
                        }
                        return serde_json::from_str(&text).map_err(|e| ClientError::Malformed {
                            endpoint: endpoint.into(),
                            message: e.to_string(),
                        });
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable || attempt >= attempts_allowed {
                        return Err(ClientError::Http {
                            endpoint: endpoint.into(),
                            status: status.as_u16(),
                            attempts: attempt,
                            body: text.chars().take(200).collect(),
                        });
                    }
                    tracing::warn!(endpoint, status = status.as_u16(), attempt, "retrying request");
                }
                Err(e) => {
                    if attempt >= attempts_allowed {
                        return Err(ClientError::Transport {
                            endpoint: endpoint.into(),
                            attempts: attempt,
                            message: e.to_string(),
                        });
                    }
                    tracing::warn!(endpoint, attempt, error = %e, "retrying request");
                    retry_after = None;
                }
            }
            let jitter = rand::rng().random::<f64>();
            std::thread::sleep(backoff_delay(self.config.backoff_base_ms, attempt, retry_after, jitter));
        }
    }

    /// Cache-first request: returns the stored body or fetches and stores it.
    fn cached(&self, endpoint: &str, request: &Value) -> Result<Value, ClientError> {
        let key = ResponseCache::key(endpoint, &self.config.model_name, request);
        if let Some(entry) = self.cache.load(&key)? {
            return Ok(entry.body);
        }
        if self.offline {
            return Err(ClientError::CacheMiss {
                endpoint: endpoint.into(),
                key,
            });
        }
        let body = self.send(endpoint, Some(request))?;
        self.cache.store(&CacheEntry {
            key,
            endpoint: endpoint.into(),
            model_name: self.config.model_name.clone(),
            request: request.clone(),
            body: body.clone(),
            created_at: now_secs(),
        })?;
        Ok(body)
    }

    fn parse_vectors(&self, body: &Value, expected: usize) -> Result<Vec<Vec<f32>>, ClientError> {
        let endpoint = self.embed_endpoint();
        let malformed = |message: String| ClientError::Malformed {
            endpoint: endpoint.into(),
            message,
        };
        let rows: Vec<&Value> = match self.config.api_style {
            ApiStyle::Minimal => body
                .get("vectors")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing `vectors` array".into()))?
                .iter()
                .collect(),
            ApiStyle::OpenAi => {
                let mut data: Vec<&Value> = body
                    .get("data")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("missing `data` array".into()))?
                    .iter()
                    .collect();
                data.sort_by_key(|d| d.get("index").and_then(Value::as_u64).unwrap_or(u64::MAX));
                data.into_iter()
                    .map(|d| {
                        d.get("embedding")
                            .ok_or_else(|| malformed("entry without `embedding`".into()))
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        if rows.len() != expected {
            return Err(malformed(format!("{} vectors for {expected} texts", rows.len())));
        }
        rows.into_iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| malformed("vector is not an array".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| malformed("non-numeric component".into()))
                    })
                    .collect()
            })
            .collect()
    }

    /// Embeds `texts`, one cache entry per distinct text. Uncached texts are
    /// deduplicated and sent in batches of at most `max_batch_size`. Either
    /// every vector is returned or an error is.
    pub fn embed_remote(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let endpoint = self.embed_endpoint();
        let model = self.config.model_name.clone();
        let mut resolved: HashMap<&str, Vec<f32>> = HashMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for &text in texts {
            if resolved.contains_key(text) || missing.contains(&text) {
                continue;
            }
            let key = ResponseCache::key(endpoint, &model, &self.embed_request(&[text]));
            match self.cache.load(&key)? {
                Some(entry) => {
                    let mut v = self.parse_vectors(&entry.body, 1)?;
                    resolved.insert(text, v.remove(0));
                }
                None if self.offline => {
                    return Err(ClientError::CacheMiss {
                        endpoint: endpoint.into(),
                        key,
                    })
                }
                None => missing.push(text),
            }
        }
        for chunk in missing.chunks(self.config.max_batch_size) {
            let body = self.send(endpoint, Some(&self.embed_request(chunk)))?;
            let vectors = self.parse_vectors(&body, chunk.len())?;
            for (&text, values) in chunk.iter().zip(vectors) {
                let request = self.embed_request(&[text]);
                let single = match self.config.api_style {
                    ApiStyle::Minimal => json!({ "vectors": [values] }),
                    ApiStyle::OpenAi => json!({ "data": [{ "index": 0, "embedding": values }] }),
                };
                self.cache.store(&CacheEntry {
                    key: ResponseCache::key(endpoint, &model, &request),
                    endpoint: endpoint.into(),
                    model_name: model.clone(),
                    request,
                    body: single,
                    created_at: now_secs(),
                })?;
                resolved.insert(text, values);
            }
        }
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector::normalized(resolved[t].clone()))
            .collect())
    }

    /// One completion, temperature 0 where the API has the knob.
    pub fn complete_remote(&self, prompt: &str) -> Result<String, ClientError> {
        let endpoint = self.complete_endpoint();
        let body = self.cached(endpoint, &self.complete_request(prompt))?;
        let text = match self.config.api_style {
            ApiStyle::Minimal => body.get("text").and_then(Value::as_str),
            ApiStyle::OpenAi => body.pointer("/choices/0/message/content").and_then(Value::as_str),
        }
        .ok_or_else(|| ClientError::Malformed {
            endpoint: endpoint.into(),
            message: "no completion text in response".into(),
        })?;
        if text.trim().is_empty() {
            return Err(ClientError::EmptyResponse {
                endpoint: endpoint.into(),
            });
        }
        Ok(text.to_string())
    }
}

impl EmbeddingProvider for RemoteClient {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        self.embed_remote(texts)
            .map_err(|e| EmbeddingError::Provider(e.to_string()))
    }
}

impl RewriteClient for RemoteClient {
    fn client_id(&self) -> &str {
        &self.provider_id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        self.complete_remote(&request.prompt)
    }
}
