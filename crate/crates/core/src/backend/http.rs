//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendConfig, BackendError, ChatMessage, GenerationRequest, GenerationResponse,
    Sample, TokenLogprob,
};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "OPENAI_API_KEY";
/// Environment variable overriding the configured endpoint.
pub const ENDPOINT_ENV: &str = "OPENAI_BASE_URL";

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    n: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<ChoiceBody>,
}

#[derive(Deserialize)]
struct ChoiceBody {
    #[serde(default)]
    index: Option<u32>,
    message: MessageBody,
    #[serde(default)]
    logprobs: Option<LogprobsBody>,
}

#[derive(Deserialize)]
struct MessageBody {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct LogprobsBody {
    #[serde(default)]
    content: Option<Vec<TokenBody>>,
}

#[derive(Deserialize)]
struct TokenBody {
    token: String,
    logprob: f64,
}

/// Decodes a chat-completions response body into samples ordered by choice index.
///
/// Logprobs are attached only when `want_logprobs` is set; a response that
/// omits them for such a request fails with [`BackendError::LogprobsUnsupported`].
pub fn parse_chat_response(
    body: &str,
    want_logprobs: bool,
) -> Result<(Option<String>, Vec<Sample>), BackendError> {
    let parsed: ChatResponseBody =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    if parsed.choices.is_empty() {
        return Err(BackendError::Malformed("response has no choices".into()));
    }
    let mut choices: Vec<(u32, ChoiceBody)> = parsed
        .choices
        .into_iter()
        .enumerate()
        .map(|(pos, c)| (c.index.unwrap_or(pos as u32), c))
        .collect();
    choices.sort_by_key(|(idx, _)| *idx);
    let samples = choices
        .into_iter()
        .map(|(_, choice)| {
            let text = choice.message.content.unwrap_or_default();
            let logprobs = if want_logprobs {
                let tokens = choice
                    .logprobs
                    .and_then(|l| l.content)
                    .ok_or(BackendError::LogprobsUnsupported)?;
                let mut out = Vec::with_capacity(tokens.len());
                for t in tokens {
                    if !t.logprob.is_finite() || t.logprob > 0.0 {
                        return Err(BackendError::Malformed(format!(
                            "token logprob {} is not a finite value <= 0",
                            t.logprob
                        )));
                    }
                    out.push(TokenLogprob {
                        token: t.token,
                        logprob: t.logprob,
                    });
                }
                Some(out)
            } else {
                None
            };
            Ok(Sample { text, logprobs })
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    Ok((parsed.model, samples))
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: BackendConfig,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    /// Builds a client; `OPENAI_BASE_URL` overrides the configured endpoint
    /// and `OPENAI_API_KEY` supplies the bearer token.
    pub fn from_env(mut config: BackendConfig) -> Result<Self, BackendError> {
        if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
            if !endpoint.trim().is_empty() {
                config.endpoint = endpoint;
            }
        }
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }

    pub fn new(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Network {
                attempts: 0,
                message: e.to_string(),
            })?;
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(Self {
            client,
            config,
            url,
            api_key,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn backoff(&self, retry: u32) -> Duration {
        let exp = self
            .config
            .backoff_base
            .saturating_mul(2u32.saturating_pow(retry.min(20)));
        let capped = exp.min(self.config.backoff_cap);
        let jitter: f64 = rand::thread_rng().gen_range(0.5..=1.0);
        capped.mul_f64(jitter)
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let body = ChatRequestBody {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            n: request.n_samples,
            logprobs: request.want_logprobs,
            seed: request.seed,
        };
        let mut retries = 0u32;
        loop {
            let mut call = self.client.post(&self.url).json(&body);
            if let Some(key) = &self.api_key {
                call = call.bearer_auth(key);
            }
            let failure = match call.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().map_err(|e| BackendError::Network {
                        attempts: retries + 1,
                        message: e.to_string(),
                    })?;
                    if (200..300).contains(&status) {
                        let (model, samples) = parse_chat_response(&text, request.want_logprobs)?;
                        return Ok(GenerationResponse {
                            samples,
                            model_id: model.unwrap_or_else(|| self.config.model.clone()),
                            cached: false,
                            retries,
                        });
                    }
                    if !retryable(status) {
                        return Err(BackendError::Http { status, body: text });
                    }
                    format!("HTTP {status}: {text}")
                }
                Err(e) => e.to_string(),
            };
            if retries >= self.config.retry_limit {
                return Err(BackendError::Network {
                    attempts: retries + 1,
                    message: failure,
                });
            }
            let delay = self.backoff(retries);
            log::warn!("transient failure ({failure}); retrying in {delay:?}");
            std::thread::sleep(delay);
            retries += 1;
        }
    }
}
