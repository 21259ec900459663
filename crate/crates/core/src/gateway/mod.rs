//! Uniform interface to completion backends.
//!
//! Three backends sit behind one trait: a remote HTTP completion service,
//! a local next-token-distribution model (required for grammar-constrained
//! decoding), and a deterministic scripted mock for tests. The [`Gateway`]
//! wrapper adds retries with capped exponential backoff, a request budget,
//! an in-flight cap, and an append-only request log.

mod mock;
mod remote;

pub use mock::{MockBackend, MockRule, MockScript, ToyModel};
pub use remote::{RemoteBackend, API_KEY_ENV};

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("request budget of {cap} exhausted")]
    BudgetExceeded { cap: u64 },
    #[error("backend does not support {capability}")]
    CapabilityUnsupported { capability: &'static str },
    #[error("text not representable in the vocabulary: {0}")]
    UnencodableText(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted response for prompt fingerprint {fingerprint}")]
    ScriptMiss { fingerprint: String },
}

/// Short stable fingerprint of a prompt, used to key caches, logs and
/// scripted mock responses.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One completion call. `max_tokens` must be at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 64,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens < 1 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Full-vocabulary logits for the next position after `context`.
#[derive(Debug, Clone)]
pub struct TokenDistribution {
    pub context: Vec<TokenId>,
    pub logits: Vec<f32>,
}

/// Token-id to byte-sequence table. Ids are dense from 0 and exactly one
/// id is the end-of-sequence token (its text is empty).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<Vec<u8>>, eos: TokenId) -> Result<Self, GatewayError> {
        if (eos as usize) >= tokens.len() {
            return Err(GatewayError::InvalidRequest(format!(
                "eos id {eos} out of range for vocabulary of {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, eos })
    }

    /// The 257-token byte-level vocabulary: one token per byte value plus
    /// an end-of-sequence token with empty text.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        tokens.push(Vec::new());
        Self { tokens, eos: 256 }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    /// Encode text as token ids by greedy longest match.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, GatewayError> {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let mut best: Option<(usize, TokenId)> = None;
            for (id, tok) in self.tokens.iter().enumerate() {
                if !tok.is_empty()
                    && bytes[pos..].starts_with(tok)
                    && best.map_or(true, |(len, _)| tok.len() > len)
                {
                    best = Some((tok.len(), id as TokenId));
                }
            }
            match best {
                Some((len, id)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    return Err(GatewayError::UnencodableText(format!(
                        "no token matches input at byte {pos}"
                    )))
                }
            }
        }
        Ok(ids)
    }

    /// Decode token ids back to text. Inverse of [`Self::tokenize`].
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, GatewayError> {
        let mut bytes = Vec::new();
        for id in ids {
            let tok = self
                .token_bytes(*id)
                .ok_or_else(|| GatewayError::UnencodableText(format!("unknown token id {id}")))?;
            bytes.extend_from_slice(tok);
        }
        String::from_utf8(bytes)
            .map_err(|e| GatewayError::UnencodableText(format!("invalid utf-8: {e}")))
    }
}

/// A completion backend. Implementations must be shareable across threads.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;

    /// Whether [`Backend::next_token_distribution`] is available.
    fn supports_distribution(&self) -> bool {
        false
    }

    fn next_token_distribution(
        &self,
        _context: &[TokenId],
    ) -> Result<TokenDistribution, GatewayError> {
        Err(GatewayError::CapabilityUnsupported {
            capability: "next_token_distribution",
        })
    }

    /// The vocabulary of the underlying model, when it exposes one.
    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }
}

/// Retry behavior for transient transport failures.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff for the given zero-based attempt, capped.
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.min(16);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord<'a> {
    ts_ms: u64,
    fingerprint: String,
    prompt: &'a str,
    response: &'a str,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

/// Wraps a backend with retries, a request-count budget, an in-flight cap
/// and an optional append-only request log.
pub struct Gateway {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    budget: Option<u64>,
    used: AtomicU64,
    inflight: Semaphore,
    log: Option<Mutex<Box<dyn Write + Send>>>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            budget: None,
            used: AtomicU64::new(0),
            inflight: Semaphore::new(4),
            log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_budget(mut self, cap: u64) -> Self {
        self.budget = Some(cap);
        self
    }

    pub fn with_concurrency(mut self, max_in_flight: usize) -> Self {
        self.inflight = Semaphore::new(max_in_flight);
        self
    }

    pub fn with_request_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        self.log = Some(Mutex::new(Box::new(std::io::BufWriter::new(file))));
        Ok(self)
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Completion calls issued so far (retries of one call count once).
    pub fn request_count(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn supports_distribution(&self) -> bool {
        self.backend.supports_distribution()
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.backend.vocabulary()
    }

    /// Run one completion, retrying transient transport failures with
    /// capped exponential backoff. Counts one request toward the budget
    /// regardless of retries.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        if let Some(cap) = self.budget {
            let prev = self.used.fetch_add(1, Ordering::SeqCst);
            if prev >= cap {
                return Err(GatewayError::BudgetExceeded { cap });
            }
        } else {
            self.used.fetch_add(1, Ordering::SeqCst);
        }
        let _permit = self.inflight.acquire();
        let mut attempt = 0;
        loop {
            match self.backend.complete(request) {
                Ok(text) => {
                    self.log_exchange(&request.prompt, &text);
                    return Ok(text);
                }
                Err(GatewayError::Transport { message, .. }) => {
                    attempt += 1;
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    std::thread::sleep(self.retry.delay(attempt - 1));
                }
                Err(other) => return Err(other),
            }
        }
    }

    pub fn next_token_distribution(
        &self,
        context: &[TokenId],
    ) -> Result<TokenDistribution, GatewayError> {
        self.backend.next_token_distribution(context)
    }

    fn log_exchange(&self, prompt: &str, response: &str) {
        if let Some(log) = &self.log {
            let record = LogRecord {
                ts_ms: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0),
                fingerprint: fingerprint(prompt),
                prompt,
                response,
            };
            let mut sink = log.lock().unwrap();
            if let Ok(line) = serde_json::to_string(&record) {
                let _ = writeln!(sink, "{line}");
                let _ = sink.flush();
            }
        }
    }
}
