//! HTTP client for a remote generation/embedding service.
//!
//! Speaks the v1 wire protocol:
//!
//! - `POST /v1/generate` `{prompt, seed, count, return_content}` →
//!   `{items: [{id, embedding, content_b64}], dim, model}`
//! - `POST /v1/embed` `{items: [{id, content_b64}], embedder}` →
//!   `{embeddings: [{id, values}], dim, embedder}`
//! - `GET /v1/health` → `{status, dim, model, embedders}`
//!
//! Transport faults (connection failures, timeouts) are retried with
//! exponential backoff. Status and schema errors are never retried. A
//! retried request carries an identical body and request id, and a fresh
//! attempt id header.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;

use super::{BackendDescriptor, GeneratorBackend};
use crate::embedding::{Embedding, SampleBatch};
use crate::error::{Error, Result};
use crate::store::EmbeddingCache;

pub const REQUEST_ID_HEADER: &str = "x-request-id";
pub const ATTEMPT_ID_HEADER: &str = "x-attempt-id";
/// Environment variable holding the bearer token for the endpoint.
pub const TOKEN_ENV: &str = "ORIGINALITY_ENDPOINT_TOKEN";

pub mod wire {
    use serde::{Deserialize, Serialize};

    pub const VERSION: &str = "v1";

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct GenerateRequest {
        pub prompt: String,
        pub seed: u64,
        pub count: u32,
        pub return_content: bool,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct GeneratedItem {
        pub id: String,
        pub embedding: Option<Vec<f64>>,
        pub content_b64: Option<String>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct GenerateResponse {
        pub items: Vec<GeneratedItem>,
        pub dim: u32,
        pub model: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedItem {
        pub id: String,
        pub content_b64: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedRequest {
        pub items: Vec<EmbedItem>,
        pub embedder: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbeddingValues {
        pub id: String,
        pub values: Vec<f64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedResponse {
        pub embeddings: Vec<EmbeddingValues>,
        pub dim: u32,
        pub embedder: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct HealthResponse {
        pub status: String,
        pub dim: u32,
        pub model: String,
        pub embedders: Vec<String>,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// Delay after the given failed attempt (1-based): `base * 2^(attempt-1)`, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://127.0.0.1:8700`.
    pub endpoint: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_inflight: usize,
    pub auth_token: Option<String>,
    /// Embed generated content with this embedder instead of using the
    /// embeddings returned by `/v1/generate`.
    pub embedder: Option<String>,
    /// Upper bound on `count` per generate request.
    pub max_count: u32,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(300),
            retry: RetryPolicy::default(),
            max_inflight: 2,
            auth_token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            embedder: None,
            max_count: 1024,
        }
    }
}

struct InflightLimit {
    active: Mutex<usize>,
    cv: Condvar,
    max: usize,
}

struct InflightGuard<'a>(&'a InflightLimit);

impl InflightLimit {
    fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InflightGuard(self)
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Low-level protocol client.
pub struct HttpClient {
    agent: ureq::Agent,
    base: String,
    config: HttpConfig,
    inflight: InflightLimit,
    next_request: AtomicU64,
    last_attempts: AtomicU32,
}

const MAX_BODY: u64 = 512 * 1024 * 1024;

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let base = config.endpoint.trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::input(format!("endpoint {base:?} is not an http(s) URL")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient {
            agent,
            base,
            inflight: InflightLimit {
                active: Mutex::new(0),
                cv: Condvar::new(),
                max: config.max_inflight.max(1),
            },
            config,
            next_request: AtomicU64::new(1),
            last_attempts: AtomicU32::new(0),
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// Attempts used by the most recently completed request.
    pub fn last_attempts(&self) -> u32 {
        self.last_attempts.load(Ordering::Relaxed)
    }

    pub fn health(&self) -> Result<wire::HealthResponse> {
        let resp: wire::HealthResponse = self.call("GET", "/v1/health", None)?;
        if resp.status != "ok" {
            return Err(Error::Protocol(format!("health status is {:?}", resp.status)));
        }
        Ok(resp)
    }

    pub fn generate(&self, req: &wire::GenerateRequest) -> Result<wire::GenerateResponse> {
        if req.count == 0 || req.count > self.config.max_count {
            return Err(Error::input(format!(
                "generate count {} outside 1..={}",
                req.count, self.config.max_count
            )));
        }
        let body = serde_json::to_vec(req)?;
        self.call("POST", "/v1/generate", Some(body))
    }

    pub fn embed(&self, req: &wire::EmbedRequest) -> Result<wire::EmbedResponse> {
        let body = serde_json::to_vec(req)?;
        self.call("POST", "/v1/embed", Some(body))
    }

    fn call<T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<Vec<u8>>) -> Result<T> {
        let _slot = self.inflight.acquire();
        let url = format!("{}{}", self.base, path);
        let request_id = format!(
            "{:08x}-{:08x}",
            std::process::id(),
            self.next_request.fetch_add(1, Ordering::Relaxed)
        );
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.attempt(method, &url, &request_id, attempt, body.as_deref()) {
                Ok(text) => {
                    self.last_attempts.store(attempt, Ordering::Relaxed);
                    return serde_json::from_str(&text).map_err(|e| {
                        Error::Protocol(format!("{path}: response does not match schema: {e}"))
                    });
                }
                Err(e) if e.is_transient() && attempt < self.config.retry.max_attempts => {
                    thread::sleep(self.config.retry.delay(attempt));
                }
                Err(e) => {
                    self.last_attempts.store(attempt, Ordering::Relaxed);
                    return Err(match e {
                        Error::Transport { message, .. } => Error::Transport {
                            message,
                            attempts: attempt,
                        },
                        Error::Timeout { .. } => Error::Timeout { attempts: attempt },
                        other => other,
                    });
                }
            }
        }
    }

    fn attempt(
        &self,
        method: &str,
        url: &str,
        request_id: &str,
        attempt: u32,
        body: Option<&[u8]>,
    ) -> Result<String> {
        let attempt_id = format!("{request_id}.{attempt}");
        let auth = self.config.auth_token.as_ref().map(|t| format!("Bearer {t}"));
        let result = match (method, body) {
            ("POST", Some(body)) => {
                let mut req = self
                    .agent
                    .post(url)
                    .header("content-type", "application/json")
                    .header(REQUEST_ID_HEADER, request_id)
                    .header(ATTEMPT_ID_HEADER, &attempt_id);
                if let Some(a) = &auth {
                    req = req.header("authorization", a);
                }
                req.send(body)
            }
            _ => {
                let mut req = self
                    .agent
                    .get(url)
                    .header(REQUEST_ID_HEADER, request_id)
                    .header(ATTEMPT_ID_HEADER, &attempt_id);
                if let Some(a) = &auth {
                    req = req.header("authorization", a);
                }
                req.call()
            }
        };
        let mut resp = result.map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_to_string()
            .map_err(transport_error)?;
        if !(200..300).contains(&status) {
            return Err(Error::Status { status, body: text });
        }
        Ok(text)
    }
}

fn transport_error(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(_) => Error::Timeout { attempts: 1 },
        ureq::Error::StatusCode(status) => Error::Status {
            status,
            body: String::new(),
        },
        ureq::Error::BadUri(u) => Error::input(format!("bad endpoint URI {u}")),
        other => Error::Transport {
            message: other.to_string(),
            attempts: 1,
        },
    }
}

/// A [`GeneratorBackend`] backed by a remote service.
pub struct HttpBackend {
    client: HttpClient,
    model: String,
    embedder: String,
    override_embedder: bool,
    declared_dim: Option<usize>,
    learned_dim: OnceLock<usize>,
    cache: Arc<EmbeddingCache>,
}

impl HttpBackend {
    /// Probes `/v1/health` and fixes the backend's declared dimension.
    pub fn connect(config: HttpConfig, cache: Arc<EmbeddingCache>) -> Result<Self> {
        let client = HttpClient::new(config)?;
        let health = client.health()?;
        let (embedder, override_embedder) = match &client.config.embedder {
            Some(name) => {
                if !health.embedders.iter().any(|e| e == name) {
                    return Err(Error::input(format!(
                        "endpoint does not offer embedder {name:?} (has {:?})",
                        health.embedders
                    )));
                }
                (name.clone(), health.embedders.first() != Some(name))
            }
            None => (
                health
                    .embedders
                    .first()
                    .cloned()
                    .unwrap_or_else(|| health.model.clone()),
                false,
            ),
        };
        let declared_dim = (!override_embedder).then_some(health.dim as usize);
        Ok(HttpBackend {
            client,
            model: health.model,
            embedder,
            override_embedder,
            declared_dim,
            learned_dim: OnceLock::new(),
            cache,
        })
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        let want = self.declared_dim.unwrap_or_else(|| *self.learned_dim.get_or_init(|| got));
        if want != got {
            return Err(Error::Contract(format!(
                "endpoint returned dimension {got}, expected {want}"
            )));
        }
        Ok(())
    }

    /// Embed raw content (e.g. a reference image) through the cache.
    pub fn embed_content(&self, id: &str, content: &[u8]) -> Result<Embedding> {
        let e = self.cache.get_or_compute(content, &self.embedder, |bytes| {
            let resp = self.client.embed(&wire::EmbedRequest {
                items: vec![wire::EmbedItem {
                    id: id.to_string(),
                    content_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
                }],
                embedder: self.embedder.clone(),
            })?;
            let values = self.embed_values(&resp, &[id.to_string()])?;
            Embedding::new(id, values.into_iter().next().unwrap_or_default())
        })?;
        Ok(e.with_id(id))
    }

    fn embed_values(&self, resp: &wire::EmbedResponse, ids: &[String]) -> Result<Vec<Vec<f64>>> {
        if resp.embedder != self.embedder {
            return Err(Error::Protocol(format!(
                "asked embedder {:?}, response from {:?}",
                self.embedder, resp.embedder
            )));
        }
        if resp.embeddings.len() != ids.len() {
            return Err(Error::Protocol(format!(
                "embed returned {} vectors for {} items",
                resp.embeddings.len(),
                ids.len()
            )));
        }
        self.check_dim(resp.dim as usize)?;
        ids.iter()
            .map(|id| {
                let v = resp
                    .embeddings
                    .iter()
                    .find(|e| &e.id == id)
                    .ok_or_else(|| Error::Protocol(format!("embed response lacks id {id:?}")))?;
                if v.values.len() != resp.dim as usize {
                    return Err(Error::Protocol(format!(
                        "vector {id:?} has {} values, response dim is {}",
                        v.values.len(),
                        resp.dim
                    )));
                }
                Ok(v.values.clone())
            })
            .collect()
    }

    fn embed_generated(&self, items: &[wire::GeneratedItem]) -> Result<Vec<Embedding>> {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut out: Vec<Option<Embedding>> = vec![None; items.len()];
        let mut pending = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let b64 = item.content_b64.as_ref().ok_or_else(|| {
                Error::Protocol(format!("item {:?} has no content to embed", item.id))
            })?;
            let bytes = engine
                .decode(b64)
                .map_err(|e| Error::Protocol(format!("item {:?}: bad base64: {e}", item.id)))?;
            match self.cache.lookup(&bytes, &self.embedder)? {
                Some(e) => out[i] = Some(e.with_id(item.id.clone())),
                None => pending.push((i, bytes)),
            }
        }
        if !pending.is_empty() {
            let ids: Vec<String> = pending.iter().map(|(i, _)| items[*i].id.clone()).collect();
            let resp = self.client.embed(&wire::EmbedRequest {
                items: pending
                    .iter()
                    .map(|(i, bytes)| wire::EmbedItem {
                        id: items[*i].id.clone(),
                        content_b64: engine.encode(bytes),
                    })
                    .collect(),
                embedder: self.embedder.clone(),
            })?;
            let vectors = self.embed_values(&resp, &ids)?;
            for ((i, bytes), values) in pending.into_iter().zip(vectors) {
                let e = Embedding::new(items[i].id.clone(), values)?;
                out[i] = Some(self.cache.insert(&bytes, &self.embedder, &e)?.with_id(items[i].id.clone()));
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every item embedded")).collect())
    }
}

impl GeneratorBackend for HttpBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: format!("http:{}:{}", self.model, self.embedder),
            dim: self.declared_dim.or_else(|| self.learned_dim.get().copied()),
            supports_raw_content: true,
            max_parallelism: self.client.config.max_inflight.max(1),
        }
    }

    fn generate(&self, prompt: &str, seed: u64, count: usize) -> Result<SampleBatch> {
        let count32 = u32::try_from(count)
            .map_err(|_| Error::input(format!("count {count} exceeds the protocol limit")))?;
        let resp = self.client.generate(&wire::GenerateRequest {
            prompt: prompt.to_string(),
            seed,
            count: count32,
            return_content: self.override_embedder,
        })?;
        if resp.items.len() != count {
            return Err(Error::Protocol(format!(
                "generate returned {} items, {count} requested",
                resp.items.len()
            )));
        }
        let mut ids = HashSet::new();
        if let Some(dup) = resp.items.iter().find(|it| !ids.insert(it.id.as_str())) {
            return Err(Error::Protocol(format!("duplicate item id {:?}", dup.id)));
        }
        let items = if self.override_embedder {
            self.embed_generated(&resp.items)?
        } else {
            self.check_dim(resp.dim as usize)?;
            resp.items
                .iter()
                .map(|item| {
                    let values = item.embedding.clone().ok_or_else(|| {
                        Error::Protocol(format!("item {:?} has no embedding", item.id))
                    })?;
                    if values.len() != resp.dim as usize {
                        return Err(Error::Contract(format!(
                            "item {:?} has dimension {}, response declares {}",
                            item.id,
                            values.len(),
                            resp.dim
                        )));
                    }
                    Embedding::new(item.id.clone(), values)
                        .map_err(|e| Error::Contract(format!("item {:?}: {e}", item.id)))
                })
                .collect::<Result<Vec<_>>>()?
        };
        SampleBatch::new(items)
    }
}
