//! Scripted, deterministic backend for tests and offline runs.
//!
//! Requests are matched against a script table. A digest matcher pins one
//! exact message list; a substring matcher fires when every needle occurs in
//! the concatenated message text. Digest matches beat substring matches, and
//! among substring matches the most specific one (more needles, then longer
//! needles) wins. Unmatched requests are errors.
//!
//! A script holds one or more replies served round-robin: sample `i` of a
//! call takes the script's next reply in sequence.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::Deserialize;

use super::{Backend, BackendError, GenerationRequest, GenerationResponse, Sample, TokenLogprob};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Matcher {
    Digest(String),
    Contains(Vec<String>),
}

impl Matcher {
    pub fn contains<I, S>(needles: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut needles: Vec<String> = needles.into_iter().map(Into::into).collect();
        needles.sort();
        needles.dedup();
        Matcher::Contains(needles)
    }

    pub fn digest(d: impl Into<String>) -> Self {
        Matcher::Digest(d.into())
    }

    fn specificity(&self) -> (usize, usize, usize) {
        match self {
            Matcher::Digest(_) => (1, 0, 0),
            Matcher::Contains(n) => (0, n.len(), n.iter().map(String::len).sum()),
        }
    }

    fn matches(&self, digest: &str, text: &str) -> bool {
        match self {
            Matcher::Digest(d) => d == digest,
            Matcher::Contains(needles) => needles.iter().all(|n| text.contains(n.as_str())),
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Digest(d) => write!(f, "digest:{d}"),
            Matcher::Contains(n) => write!(f, "contains:{n:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedReply {
    pub text: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprobs: None,
        }
    }

    pub fn with_logprobs<S: Into<String>>(
        text: impl Into<String>,
        tokens: impl IntoIterator<Item = (S, f64)>,
    ) -> Self {
        Self {
            text: text.into(),
            logprobs: Some(
                tokens
                    .into_iter()
                    .map(|(token, logprob)| TokenLogprob {
                        token: token.into(),
                        logprob,
                    })
                    .collect(),
            ),
        }
    }
}

struct Script {
    matcher: Matcher,
    replies: Vec<ScriptedReply>,
    cursor: AtomicUsize,
    hits: AtomicUsize,
}

/// Handle to a registered script; reports how often it fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptHandle(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub prompt_digest: String,
    pub replies: Vec<String>,
}

pub struct MockBackend {
    model_id: String,
    scripts: RwLock<Vec<Script>>,
    latency: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl MockBackend {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            scripts: RwLock::new(Vec::new()),
            latency: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Sleeps for `latency` inside every call, so concurrency is observable.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn script(&self, matcher: Matcher, reply: ScriptedReply) -> Result<ScriptHandle, BackendError> {
        self.script_replies(matcher, vec![reply])
    }

    pub fn script_replies(
        &self,
        matcher: Matcher,
        replies: Vec<ScriptedReply>,
    ) -> Result<ScriptHandle, BackendError> {
        if replies.is_empty() {
            return Err(BackendError::Script("a script needs at least one reply".into()));
        }
        if let Matcher::Contains(needles) = &matcher {
            if needles.is_empty() || needles.iter().any(String::is_empty) {
                return Err(BackendError::Script("substring matchers need non-empty needles".into()));
            }
        }
        let mut scripts = self.scripts.write().expect("script table lock");
        if scripts.iter().any(|s| s.matcher == matcher) {
            return Err(BackendError::DuplicateMatcher(matcher.to_string()));
        }
        scripts.push(Script {
            matcher,
            replies,
            cursor: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        });
        Ok(ScriptHandle(scripts.len() - 1))
    }

    /// Loads a JSON script file (see [`parse_mock_script`]).
    pub fn from_script_json(model_id: impl Into<String>, json: &str) -> Result<Self, BackendError> {
        let mock = Self::new(model_id);
        for (matcher, replies) in parse_mock_script(json)? {
            mock.script_replies(matcher, replies)?;
        }
        Ok(mock)
    }

    pub fn hits(&self, handle: ScriptHandle) -> usize {
        self.scripts.read().expect("script table lock")[handle.0]
            .hits
            .load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    fn respond(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let digest = request.prompt_digest();
        let text: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let scripts = self.scripts.read().expect("script table lock");
        let mut best: Option<&Script> = None;
        let mut tied = false;
        for script in scripts.iter().filter(|s| s.matcher.matches(&digest, &text)) {
            match best {
                None => best = Some(script),
                Some(b) => match script.matcher.specificity().cmp(&b.matcher.specificity()) {
                    std::cmp::Ordering::Greater => {
                        best = Some(script);
                        tied = false;
                    }
                    std::cmp::Ordering::Equal => tied = true,
                    std::cmp::Ordering::Less => {}
                },
            }
        }
        let script = match (best, tied) {
            (None, _) => return Err(BackendError::Unmatched { digest }),
            (Some(_), true) => return Err(BackendError::AmbiguousMatch { digest }),
            (Some(s), false) => s,
        };
        script.hits.fetch_add(1, Ordering::SeqCst);
        let n = request.n_samples as usize;
        let start = script.cursor.fetch_add(n, Ordering::SeqCst);
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let reply = &script.replies[(start + i) % script.replies.len()];
                Sample {
                    text: reply.text.clone(),
                    logprobs: reply.logprobs.clone(),
                }
            })
            .collect();
        self.transcript
            .lock()
            .expect("transcript lock")
            .push(TranscriptEntry {
                prompt_digest: digest,
                replies: samples.iter().map(|s| s.text.clone()).collect(),
            });
        Ok(GenerationResponse {
            samples,
            model_id: self.model_id.clone(),
            cached: false,
            retries: 0,
        })
    }
}

impl Backend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        let result = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogprobSpec {
    Bare(f64),
    Pair(String, f64),
    Token { token: String, logprob: f64 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplySpec {
    Text(String),
    Full {
        text: String,
        #[serde(default)]
        logprobs: Option<Vec<LogprobSpec>>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    #[serde(default)]
    contains: Option<Vec<String>>,
    #[serde(default)]
    digest: Option<String>,
    #[serde(default)]
    reply: Option<String>,
    #[serde(default)]
    logprobs: Option<Vec<LogprobSpec>>,
    #[serde(default)]
    replies: Option<Vec<ReplySpec>>,
}

fn convert_logprobs(specs: Vec<LogprobSpec>) -> Result<Vec<TokenLogprob>, BackendError> {
    specs
        .into_iter()
        .map(|spec| {
            let (token, logprob) = match spec {
                LogprobSpec::Bare(lp) => (String::new(), lp),
                LogprobSpec::Pair(t, lp) | LogprobSpec::Token { token: t, logprob: lp } => (t, lp),
            };
            if !logprob.is_finite() || logprob > 0.0 {
                return Err(BackendError::Script(format!(
                    "logprob {logprob} must be finite and <= 0"
                )));
            }
            Ok(TokenLogprob { token, logprob })
        })
        .collect()
}

/// Parses a mock script file.
///
/// The file is a JSON array. Each entry has exactly one of `contains`
/// (list of substrings) or `digest` (prompt digest), and exactly one of
/// `reply` (text, optionally with `logprobs`) or `replies` (list of texts or
/// `{"text", "logprobs"}` objects). Logprobs are numbers, `[token, logprob]`
/// pairs, or `{"token", "logprob"}` objects.
pub fn parse_mock_script(json: &str) -> Result<Vec<(Matcher, Vec<ScriptedReply>)>, BackendError> {
    let entries: Vec<ScriptEntry> =
        serde_json::from_str(json).map_err(|e| BackendError::Script(e.to_string()))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, entry)| {
            let err = |m: &str| BackendError::Script(format!("entry {i}: {m}"));
            let matcher = match (entry.contains, entry.digest) {
                (Some(needles), None) => Matcher::contains(needles),
                (None, Some(d)) => Matcher::digest(d),
                _ => return Err(err("exactly one of `contains` or `digest` is required")),
            };
            let replies = match (entry.reply, entry.replies) {
                (Some(text), None) => vec![ScriptedReply {
                    text,
                    logprobs: entry.logprobs.map(convert_logprobs).transpose()?,
                }],
                (None, Some(list)) if entry.logprobs.is_none() => list
                    .into_iter()
                    .map(|r| match r {
                        ReplySpec::Text(text) => Ok(ScriptedReply::text(text)),
                        ReplySpec::Full { text, logprobs } => Ok(ScriptedReply {
                            text,
                            logprobs: logprobs.map(convert_logprobs).transpose()?,
                        }),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return Err(err("exactly one of `reply` or `replies` is required")),
            };
            if replies.is_empty() {
                return Err(err("`replies` is empty"));
            }
            Ok((matcher, replies))
        })
        .collect()
}
