//! Uniform LLM access.
//!
//! Every pipeline talks to a [`Backend`]. Three implementations ship here:
//! an OpenAI-compatible HTTP client ([`HttpBackend`]), a scripted
//! deterministic mock ([`MockBackend`]), and a response cache
//! ([`CachedBackend`]) that wraps either one and makes evaluation runs
//! resumable. [`dispatch`] runs per-item work with bounded parallelism.

mod cache;
mod dispatch;
mod http;
mod mock;

use std::time::Duration;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::CachedBackend;
pub use dispatch::dispatch;
pub use http::{parse_chat_response, HttpBackend, API_KEY_ENV, ENDPOINT_ENV};
pub use mock::{parse_mock_script, Matcher, MockBackend, ScriptHandle, ScriptedReply, TranscriptEntry};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint did not return logprobs for a request that asked for them")]
    LogprobsUnsupported,
    #[error("mock backend: no script matches request with prompt digest {digest}")]
    Unmatched { digest: String },
    #[error("mock backend: several scripts match prompt digest {digest} equally well")]
    AmbiguousMatch { digest: String },
    #[error("mock backend: a script with matcher {0} is already registered")]
    DuplicateMatcher(String),
    #[error("mock script: {0}")]
    Script(String),
    #[error("response cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            max_tokens: 256,
            n_samples: 1,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }

    pub fn logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidRequest(m.to_string()));
        if self.messages.is_empty() {
            return bad("messages must be non-empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a finite value >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if self.n_samples > 1 && self.temperature == 0.0 {
            return bad("n_samples > 1 requires temperature > 0");
        }
        Ok(())
    }

    /// Digest of the message list alone; used in traces and mock scripts.
    pub fn prompt_digest(&self) -> String {
        prompt_digest(&self.messages)
    }

    /// Cache key: every field that can change the response, plus the model id.
    pub fn digest(&self, model_id: &str) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a str,
            request: &'a GenerationRequest,
        }
        let bytes = serde_json::to_vec(&Key {
            model: model_id,
            request: self,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub samples: Vec<Sample>,
    pub model_id: String,
    #[serde(skip)]
    pub cached: bool,
    /// Transient failures retried before this response arrived.
    #[serde(skip)]
    pub retries: u32,
}

impl GenerationResponse {
    pub fn first_text(&self) -> &str {
        self.samples.first().map(|s| s.text.as_str()).unwrap_or("")
    }

    pub fn texts(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub max_concurrent: usize,
    pub retry_limit: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    #[serde(with = "millis")]
    pub backoff_cap: Duration,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".to_string(),
            model: "gpt-4o-mini".to_string(),
            max_concurrent: 4,
            retry_limit: 5,
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(30),
            timeout: Duration::from_secs(120),
            cache_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_concurrent == 0 {
            return Err(BackendError::InvalidRequest(
                "max concurrent requests must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// A source of completions. Implementations must be safe to call from
/// several threads at once.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Validates the request, calls the backend, and enforces the response contract.
pub fn generate(
    backend: &dyn Backend,
    request: &GenerationRequest,
) -> Result<GenerationResponse, BackendError> {
    request.validate()?;
    let mut response = backend.complete(request)?;
    if response.samples.len() != request.n_samples as usize {
        return Err(BackendError::Malformed(format!(
            "expected {} samples, got {}",
            request.n_samples,
            response.samples.len()
        )));
    }
    if request.want_logprobs {
        if response.samples.iter().any(|s| s.logprobs.is_none()) {
            return Err(BackendError::LogprobsUnsupported);
        }
    } else {
        for sample in &mut response.samples {
            sample.logprobs = None;
        }
    }
    Ok(response)
}

/// Draws `k` samples for one prompt.
pub fn sample_n(
    backend: &dyn Backend,
    request: &GenerationRequest,
    k: u32,
) -> Result<GenerationResponse, BackendError> {
    let request = GenerationRequest {
        n_samples: k,
        ..request.clone()
    };
    generate(backend, &request)
}
