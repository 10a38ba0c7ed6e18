//! Chat-completion access for the optimizer and target models.
//!
//! Every call goes through [`Gateway::complete`], which serves repeatable
//! requests from a persistent cache, retries transient failures with
//! exponential backoff, bounds in-flight requests per role, and appends one
//! record per response to the response log used for token accounting.

mod cache;
mod http;
mod scripted;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

pub use cache::{ResponseCache, ResponseLog, ResponseRecord};
pub use http::{HttpAdapter, HttpSettings};
pub use scripted::{whitespace_tokens, ScriptRule, ScriptedAdapter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Optimizer,
    Target,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Optimizer => "optimizer",
            ModelRole::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_role: ModelRole,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_output: u32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Protocol("chat request has no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Protocol("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Digest of the message list alone; the scripted adapter's lookup key.
    pub fn messages_digest(&self) -> String {
        let json = serde_json::to_vec(&self.messages).expect("messages serialize");
        sha256_hex(&json)
    }

    /// Digest of everything that determines the completion.
    pub fn cache_key(&self) -> String {
        let json = serde_json::to_vec(&(
            self.model_role,
            &self.messages,
            self.temperature,
            self.seed,
            self.max_output,
        ))
        .expect("request serializes");
        sha256_hex(&json)
    }

    /// Sampling without a fixed seed at positive temperature is never cached.
    pub fn is_cacheable(&self) -> bool {
        self.temperature == 0.0 || self.seed.is_some()
    }

    pub fn system_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == MessageRole::System)
            .map_or("", |m| m.content.as_str())
    }

    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Http,
    Scripted,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub adapter: AdapterKind,
}

/// Failure reported by an adapter for a single attempt.
#[derive(Debug, Clone)]
pub enum SendError {
    /// Timeouts, connection resets, 429 and 5xx. Retried.
    Transient { status: Option<u16>, message: String },
    /// Anything else the endpoint rejected. Not retried.
    Fatal { status: Option<u16>, message: String },
    /// The endpoint answered with something that is not a completion.
    Protocol(String),
}

pub trait ChatAdapter: Send + Sync {
    fn kind(&self) -> AdapterKind;
    fn send(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, SendError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

struct RoleChannel {
    adapter: Arc<dyn ChatAdapter>,
    limit: Semaphore,
}

pub struct Gateway {
    optimizer: RoleChannel,
    target: RoleChannel,
    retry: RetryPolicy,
    cache: Option<ResponseCache>,
    log: ResponseLog,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("optimizer", &self.optimizer.adapter.kind())
            .field("target", &self.target.adapter.kind())
            .field("retry", &self.retry)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

pub struct GatewayBuilder {
    optimizer: Arc<dyn ChatAdapter>,
    target: Arc<dyn ChatAdapter>,
    optimizer_concurrency: usize,
    target_concurrency: usize,
    retry: RetryPolicy,
    cache: Option<ResponseCache>,
    log: ResponseLog,
}

impl GatewayBuilder {
    pub fn concurrency(mut self, optimizer: usize, target: usize) -> Self {
        self.optimizer_concurrency = optimizer;
        self.target_concurrency = target;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn log(mut self, log: ResponseLog) -> Self {
        self.log = log;
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            optimizer: RoleChannel {
                adapter: self.optimizer,
                limit: Semaphore::new(self.optimizer_concurrency),
            },
            target: RoleChannel {
                adapter: self.target,
                limit: Semaphore::new(self.target_concurrency),
            },
            retry: self.retry,
            cache: self.cache,
            log: self.log,
        }
    }
}

impl Gateway {
    pub fn builder(optimizer: Arc<dyn ChatAdapter>, target: Arc<dyn ChatAdapter>) -> GatewayBuilder {
        GatewayBuilder {
            optimizer,
            target,
            optimizer_concurrency: 4,
            target_concurrency: 8,
            retry: RetryPolicy::default(),
            cache: None,
            log: ResponseLog::in_memory(),
        }
    }

    fn channel(&self, role: ModelRole) -> &RoleChannel {
        match role {
            ModelRole::Optimizer => &self.optimizer,
            ModelRole::Target => &self.target,
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let key = req.cache_key();
        if req.is_cacheable() {
            if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                let resp = ChatResponse {
                    text: hit.text,
                    usage: hit.usage,
                    adapter: AdapterKind::Cache,
                };
                self.log.record(req.model_role, &key, &resp)?;
                return Ok(resp);
            }
        }

        let channel = self.channel(req.model_role);
        let _permit = channel.limit.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match channel.adapter.send(req) {
                Ok(resp) => {
                    if req.is_cacheable() {
                        if let Some(cache) = &self.cache {
                            cache.insert(&key, &resp.text, resp.usage);
                        }
                    }
                    self.log.record(req.model_role, &key, &resp)?;
                    return Ok(resp);
                }
                Err(SendError::Transient { status, message }) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(Error::Gateway {
                            attempts: attempt,
                            status,
                            message,
                        });
                    }
                    let delay = self.retry.delay_before(attempt);
                    warn!(role = %req.model_role, attempt, ?status, ?delay, "transient failure, retrying: {message}");
                    std::thread::sleep(delay);
                }
                Err(SendError::Fatal { status, message }) => {
                    return Err(Error::Gateway {
                        attempts: attempt,
                        status,
                        message,
                    });
                }
                Err(SendError::Protocol(message)) => {
                    debug!(role = %req.model_role, "protocol failure");
                    return Err(Error::Protocol(message));
                }
            }
        }
    }

    /// Persists the response cache, if one is attached.
    pub fn flush(&self) -> Result<()> {
        match &self.cache {
            Some(cache) => cache.flush(),
            None => Ok(()),
        }
    }

    pub fn response_records(&self) -> Vec<ResponseRecord> {
        self.log.records()
    }
}

/// (optimizer tokens, target tokens) summed over fresh responses.
///
/// Cache hits cost nothing and are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenTotals {
    pub optimizer: u64,
    pub target: u64,
}

pub fn token_totals(records: &[ResponseRecord]) -> TokenTotals {
    let mut totals = TokenTotals::default();
    for r in records.iter().filter(|r| r.adapter != AdapterKind::Cache) {
        let n = r.input_tokens + r.output_tokens;
        match r.role {
            ModelRole::Optimizer => totals.optimizer += n,
            ModelRole::Target => totals.target += n,
        }
    }
    totals
}
