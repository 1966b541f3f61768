//! Chat-completion client for OpenAI-compatible endpoints, with a replay cache.
//!
//! Every request is identified by a fingerprint: the SHA-256 of a canonical
//! JSON encoding of the model name, decode parameters, optional system prompt
//! and the exact prompt bytes. The cache maps fingerprints to response text:
//!
//! - `Record`: serve hits from the cache, call the endpoint on misses and keep
//!   the answer.
//! - `Replay`: serve hits, fail misses with [`InferenceError::CacheMiss`];
//!   the transport is never touched.
//! - `Passthrough`: always call the endpoint, never store.
//!
//! On disk the cache is JSONL, one `{"fingerprint", "response"}` object per
//! line, written sorted by fingerprint.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::util::{parallel_map, sha256_hex};

pub const API_KEY_ENV: &str = "PHONICL_API_KEY";
pub const MAX_PARALLELISM: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("replay cache has no entry for fingerprint {0}")]
    CacheMiss(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    EndpointError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("cache file {path} line {line}: {reason}")]
    CacheParse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff_ms: u64,
    pub parallelism: usize,
    /// Sent as a system message ahead of the prompt when set.
    pub system_prompt: Option<String>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model: "meta-llama/Meta-Llama-3-8B-Instruct".into(),
            api_key_env: API_KEY_ENV.into(),
            temperature: 0.0,
            max_tokens: 256,
            timeout_s: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            parallelism: 4,
            system_prompt: None,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::InvalidConfig(m.into()));
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.timeout_s > 0.0) {
            return bad("timeout_s must be > 0");
        }
        if self.parallelism == 0 || self.parallelism > MAX_PARALLELISM {
            return bad("parallelism must be in 1..=256");
        }
        if self.model.is_empty() {
            return bad("model must be set");
        }
        Ok(())
    }

    pub fn chat_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }

    pub fn request(&self, prompt: &str) -> ChatRequest {
        let mut messages = Vec::new();
        if let Some(sys) = &self.system_prompt {
            messages.push(ChatMessage {
                role: "system".into(),
                content: sys.clone(),
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: prompt.to_string(),
        });
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Wire body for `POST /v1/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Cache key for a prompt under the given model and decode parameters.
pub fn fingerprint(cfg: &EndpointConfig, prompt: &str) -> String {
    // serde_json writes struct fields in declaration order, so this is canonical.
    let body = serde_json::to_vec(&cfg.request(prompt)).expect("request serializes");
    sha256_hex(&body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    fingerprint: String,
    response: String,
}

#[derive(Debug)]
pub struct ReplayCache {
    mode: CacheMode,
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, String>>,
}

impl ReplayCache {
    pub fn in_memory(mode: CacheMode) -> Self {
        Self {
            mode,
            path: None,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    /// Open a cache file; a missing file is an empty cache.
    pub fn open(path: &Path, mode: CacheMode) -> Result<Self, InferenceError> {
        let mut entries = BTreeMap::new();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: CacheLine =
                        serde_json::from_str(line).map_err(|e| InferenceError::CacheParse {
                            path: path.display().to_string(),
                            line: i + 1,
                            reason: e.to_string(),
                        })?;
                    entries.insert(rec.fingerprint, rec.response);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => {
                return Err(InferenceError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        }
        Ok(Self {
            mode,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
        })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn get(&self, fp: &str) -> Option<String> {
        self.entries.read().unwrap().get(fp).cloned()
    }

    pub fn insert(&self, fp: String, response: String) {
        self.entries.write().unwrap().insert(fp, response);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (fp, resp) in self.entries.read().unwrap().iter() {
            let line = CacheLine {
                fingerprint: fp.clone(),
                response: resp.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), InferenceError> {
        let io = |source| InferenceError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    /// Write back to the file the cache was opened from (Record mode only).
    pub fn flush(&self) -> Result<(), InferenceError> {
        match (&self.path, self.mode) {
            (Some(p), CacheMode::Record) => self.save(p),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Status { status: u16, body: String },
    Timeout,
    Network(String),
    BadResponse(String),
}

impl TransportError {
    fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Timeout | TransportError::Network(_) => true,
            TransportError::BadResponse(_) => false,
        }
    }
}

impl From<TransportError> for InferenceError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Status { status, body } => InferenceError::EndpointError { status, body },
            TransportError::Timeout => InferenceError::Timeout,
            TransportError::Network(m) => InferenceError::Transport(m),
            TransportError::BadResponse(m) => InferenceError::BadResponse(m),
        }
    }
}

/// Sends one chat request and returns the assistant text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, cfg: &EndpointConfig, request: &ChatRequest) -> Result<String, TransportError>;
}

impl<F> ChatTransport for F
where
    F: Fn(&EndpointConfig, &ChatRequest) -> Result<String, TransportError> + Send + Sync,
{
    fn send(&self, cfg: &EndpointConfig, request: &ChatRequest) -> Result<String, TransportError> {
        self(cfg, request)
    }
}

/// Blocking HTTP transport.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpTransport;

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Extract `choices[0].message.content` from a response body.
pub fn parse_response(body: &str) -> Result<String, TransportError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| TransportError::BadResponse(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| TransportError::BadResponse("no choices".into()))
}

impl ChatTransport for HttpTransport {
    fn send(&self, cfg: &EndpointConfig, request: &ChatRequest) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::to_string(request).expect("request serializes");
        let mut req = agent
            .post(&cfg.chat_url())
            .header("Content-Type", "application/json");
        if let Some(key) = cfg.api_key() {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.as_bytes()).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: text });
        }
        parse_response(&text)
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        ureq::Error::StatusCode(status) => TransportError::Status {
            status,
            body: String::new(),
        },
        other => TransportError::Network(other.to_string()),
    }
}

pub struct Client<T: ChatTransport = HttpTransport> {
    cfg: EndpointConfig,
    transport: T,
}

impl Client<HttpTransport> {
    pub fn new(cfg: EndpointConfig) -> Result<Self, InferenceError> {
        Client::with_transport(cfg, HttpTransport)
    }
}

impl<T: ChatTransport> Client<T> {
    pub fn with_transport(cfg: EndpointConfig, transport: T) -> Result<Self, InferenceError> {
        cfg.validate()?;
        Ok(Self { cfg, transport })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn send_with_retries(&self, prompt: &str) -> Result<String, InferenceError> {
        let request = self.cfg.request(prompt);
        let mut attempt = 0u32;
        loop {
            match self.transport.send(&self.cfg, &request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn complete(&self, prompt: &str, cache: &ReplayCache) -> Result<String, InferenceError> {
        let fp = fingerprint(&self.cfg, prompt);
        match cache.mode() {
            CacheMode::Replay => cache.get(&fp).ok_or(InferenceError::CacheMiss(fp)),
            CacheMode::Record => {
                if let Some(hit) = cache.get(&fp) {
                    return Ok(hit);
                }
                let text = self.send_with_retries(prompt)?;
                cache.insert(fp, text.clone());
                Ok(text)
            }
            CacheMode::Passthrough => self.send_with_retries(prompt),
        }
    }

    /// Order-preserving; at most `parallelism` requests in flight. One slot per prompt.
    pub fn complete_batch(
        &self,
        prompts: &[String],
        cache: &ReplayCache,
    ) -> Vec<Result<String, InferenceError>> {
        parallel_map(prompts, self.cfg.parallelism, |p| self.complete(p, cache))
    }
}

/// One-off completion over HTTP.
pub fn complete(cfg: &EndpointConfig, prompt: &str, cache: &ReplayCache) -> Result<String, InferenceError> {
    Client::new(cfg.clone())?.complete(prompt, cache)
}

pub fn complete_batch(
    cfg: &EndpointConfig,
    prompts: &[String],
    cache: &ReplayCache,
) -> Result<Vec<Result<String, InferenceError>>, InferenceError> {
    Ok(Client::new(cfg.clone())?.complete_batch(prompts, cache))
}
