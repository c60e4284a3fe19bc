//! Answer-correctness judging.
//!
//! Relaxed exact match counts a response as correct when any normalized gold
//! alias occurs anywhere in the normalized response. Tail token recall checks
//! that a long reasoning path ends with the gold answer. The LLM judge is a
//! yes/no equivalence question for datasets whose gold lists are incomplete.

use std::collections::BTreeMap;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, Backend, BackendError, GenerationRequest};
use crate::datamodel::QAInstance;
use crate::prompts::{Bindings, PromptError, TemplateName, TemplateSet};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("unparseable verdict: {reply:?}")]
    UnparseableVerdict { reply: String },
    #[error("dataset `{dataset}` is judged by an LLM but no judge backend was supplied")]
    NoJudgeBackend { dataset: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    ExactMatch,
    TokenRecall,
    LlmJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessLabel {
    pub correct: bool,
    pub judge: JudgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeStrategy {
    #[serde(rename = "em")]
    Em,
    #[serde(rename = "llm")]
    Llm,
    #[serde(rename = "em_then_llm")]
    EmThenLlm,
}

/// Dataset name (case-insensitive) to judging strategy. Unlisted datasets use EM.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, JudgeStrategy>", into = "BTreeMap<String, JudgeStrategy>")]
pub struct JudgePolicy {
    strategies: BTreeMap<String, JudgeStrategy>,
}

impl From<BTreeMap<String, JudgeStrategy>> for JudgePolicy {
    fn from(map: BTreeMap<String, JudgeStrategy>) -> Self {
        let mut p = Self::default();
        for (dataset, strategy) in map {
            p.set(&dataset, strategy);
        }
        p
    }
}

impl From<JudgePolicy> for BTreeMap<String, JudgeStrategy> {
    fn from(p: JudgePolicy) -> Self {
        p.strategies
    }
}

impl JudgePolicy {
    /// EM for TriviaQA, PopQA, ClashEval and RedditQA; the LLM judge for
    /// FreshQA; EM with LLM fallback for NaturalQA.
    pub fn standard() -> Self {
        let mut p = Self::default();
        for d in ["triviaqa", "popqa", "clasheval", "redditqa"] {
            p.set(d, JudgeStrategy::Em);
        }
        p.set("freshqa", JudgeStrategy::Llm);
        p.set("naturalqa", JudgeStrategy::EmThenLlm);
        p
    }

    pub fn set(&mut self, dataset: &str, strategy: JudgeStrategy) {
        self.strategies.insert(dataset.to_lowercase(), strategy);
    }

    pub fn strategy(&self, dataset: &str) -> JudgeStrategy {
        self.strategies
            .get(&dataset.to_lowercase())
            .copied()
            .unwrap_or(JudgeStrategy::Em)
    }
}

/// Lowercases, turns punctuation into spaces, collapses whitespace, and drops
/// a leading article when more words follow it.
pub fn normalize(text: &str) -> String {
    let spaced: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let mut words: Vec<&str> = spaced.split_whitespace().collect();
    if words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

pub fn exact_match_relaxed(response: &str, gold_answers: &[String]) -> bool {
    let response = normalize(response);
    gold_answers.iter().any(|gold| {
        let gold = normalize(gold);
        !gold.is_empty() && response.contains(&gold)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallScore {
    pub score: f64,
    pub pass: bool,
}

pub const DEFAULT_WINDOW_MULT: usize = 3;
pub const DEFAULT_RECALL_THRESHOLD: f64 = 0.5;

/// Fraction of gold tokens found among the last `window_mult * |gold tokens|`
/// response tokens; passes when strictly above `threshold`.
pub fn token_recall_tail(
    response: &str,
    gold: &str,
    window_mult: usize,
    threshold: f64,
) -> RecallScore {
    let gold_norm = normalize(gold);
    let gold_tokens: Vec<&str> = gold_norm.split_whitespace().collect();
    if gold_tokens.is_empty() {
        return RecallScore {
            score: 0.0,
            pass: false,
        };
    }
    let resp_norm = normalize(response);
    let resp_tokens: Vec<&str> = resp_norm.split_whitespace().collect();
    let window = window_mult.saturating_mul(gold_tokens.len());
    let tail: HashSet<&str> = resp_tokens[resp_tokens.len().saturating_sub(window)..]
        .iter()
        .copied()
        .collect();
    let found = gold_tokens.iter().filter(|t| tail.contains(*t)).count();
    let score = found as f64 / gold_tokens.len() as f64;
    RecallScore {
        score,
        pass: score > threshold,
    }
}

/// Reads a leading keyword from a model reply, ignoring case, surrounding
/// whitespace, quotes and markdown emphasis. The keyword must end at a word
/// boundary.
pub fn parse_leading_keyword(reply: &str, keywords: &[(&str, bool)]) -> Option<bool> {
    let trimmed = reply.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '_' | '`' | '[' | '(')
    });
    let lower = trimmed.to_lowercase();
    keywords.iter().find_map(|(kw, value)| {
        let rest = lower.strip_prefix(kw)?;
        match rest.chars().next() {
            Some(c) if c.is_alphanumeric() => None,
            _ => Some(*value),
        }
    })
}

pub fn parse_yes_no(reply: &str) -> Result<bool, JudgeError> {
    parse_leading_keyword(reply, &[("yes", true), ("no", false)]).ok_or_else(|| {
        JudgeError::UnparseableVerdict {
            reply: reply.to_string(),
        }
    })
}

/// Asks the judge model whether `response` matches any gold alias.
pub fn llm_judge(
    instance: &QAInstance,
    response: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<bool, JudgeError> {
    let bindings = Bindings::new()
        .with("question", &instance.question)
        .with("model_answer", response)
        .with("gold_answer", &instance.gold_answers.join(" | "));
    let messages = templates.render(TemplateName::LlmJudge, &bindings, 0)?;
    let request = GenerationRequest::new(messages).max_tokens(8);
    let reply = backend::generate(backend, &request)?;
    parse_yes_no(reply.first_text())
}

pub fn judge(
    instance: &QAInstance,
    response: &str,
    policy: &JudgePolicy,
    backend: Option<&dyn Backend>,
    templates: &TemplateSet,
) -> Result<CorrectnessLabel, JudgeError> {
    let em = || CorrectnessLabel {
        correct: exact_match_relaxed(response, &instance.gold_answers),
        judge: JudgeKind::ExactMatch,
        detail: None,
    };
    let llm = || -> Result<CorrectnessLabel, JudgeError> {
        let backend = backend.ok_or_else(|| JudgeError::NoJudgeBackend {
            dataset: instance.dataset.clone(),
        })?;
        Ok(CorrectnessLabel {
            correct: llm_judge(instance, response, backend, templates)?,
            judge: JudgeKind::LlmJudge,
            detail: None,
        })
    };
    match policy.strategy(&instance.dataset) {
        JudgeStrategy::Em => Ok(em()),
        JudgeStrategy::Llm => llm(),
        JudgeStrategy::EmThenLlm => {
            let label = em();
            if label.correct {
                Ok(label)
            } else {
                llm()
            }
        }
    }
}
