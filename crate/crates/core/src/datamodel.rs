//! QA instances paired with a correct and an incorrect context.
//!
//! Every instance is evaluated twice: once with its correct context and once
//! with its incorrect one. This module owns the record format, loading and
//! saving of JSONL datasets, expansion into evaluation pairs, construction of
//! balanced calibration sets, and synthesis of incorrect contexts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::correctness::exact_match_relaxed;
use crate::prompts::{Bindings, PromptError, TemplateName, TemplateSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: instance {id}: {message}")]
    Invalid {
        line: usize,
        id: String,
        message: String,
    },
    #[error("instance {id}: {message}")]
    InvalidInstance { id: String, message: String },
    #[error("calibration set of size {requested} needs at least {needed} dev instances, found {available}")]
    InsufficientDev {
        requested: usize,
        needed: usize,
        available: usize,
    },
    #[error("instance {id}: wrong-context synthesis exhausted after {attempts} attempts")]
    SynthesisExhausted { id: String, attempts: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One question with its gold aliases and a correct/incorrect context pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub dataset: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub choices: Option<Vec<String>>,
    pub correct_context: String,
    pub wrong_context: String,
    pub wrong_context_answer: Option<String>,
    pub split: Split,
}

impl QAInstance {
    pub fn validate(&self) -> Result<(), String> {
        self.validate_with(true)
    }

    fn validate_with(&self, require_wrong_context: bool) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("field `id` is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("field `question` is empty".into());
        }
        if self.gold_answers.is_empty() || self.gold_answers.iter().any(|g| g.trim().is_empty()) {
            return Err("field `gold_answers` must be a non-empty list of non-empty aliases".into());
        }
        if self.correct_context.trim().is_empty() {
            return Err("field `correct_context` is empty".into());
        }
        if require_wrong_context {
            if self.wrong_context.trim().is_empty() {
                return Err("field `wrong_context` is empty".into());
            }
            if self.wrong_context == self.correct_context {
                return Err("`correct_context` and `wrong_context` are identical".into());
            }
        }
        if let Some(choices) = &self.choices {
            if choices.len() != 4 {
                return Err(format!("`choices` must hold 4 options, found {}", choices.len()));
            }
            let gold_in_choices = self
                .gold_answers
                .iter()
                .filter(|g| choices.contains(g))
                .count();
            if gold_in_choices != 1 {
                return Err(format!(
                    "exactly one gold answer must appear among `choices`, found {gold_in_choices}"
                ));
            }
            if let Some(wrong) = &self.wrong_context_answer {
                if !choices.contains(wrong) {
                    return Err("`wrong_context_answer` is not one of `choices`".into());
                }
                if self.gold_answers.contains(wrong) {
                    return Err("`wrong_context_answer` equals the gold answer".into());
                }
            }
        }
        Ok(())
    }

    /// The context presented under `condition`; `None` for the closed-book condition.
    pub fn context_for(&self, condition: EvalCondition) -> Option<&str> {
        match condition {
            EvalCondition::TrueContext => Some(&self.correct_context),
            EvalCondition::FalseContext => Some(&self.wrong_context),
            EvalCondition::NoContext => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCondition {
    TrueContext,
    FalseContext,
    NoContext,
}

impl EvalCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalCondition::TrueContext => "true_context",
            EvalCondition::FalseContext => "false_context",
            EvalCondition::NoContext => "no_context",
        }
    }
}

impl fmt::Display for EvalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dev-split sample with a balanced mix of correct and incorrect contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub entries: Vec<(QAInstance, EvalCondition)>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn count(&self, condition: EvalCondition) -> usize {
        self.entries.iter().filter(|(_, c)| *c == condition).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Synthesis inputs may omit the incorrect context.
    pub require_wrong_context: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            require_wrong_context: true,
        }
    }
}

#[derive(Deserialize)]
struct RawInstance {
    id: Option<String>,
    dataset: Option<String>,
    question: Option<String>,
    gold_answers: Option<Vec<String>>,
    #[serde(default)]
    choices: Option<Vec<String>>,
    correct_context: Option<String>,
    wrong_context: Option<String>,
    #[serde(default)]
    wrong_context_answer: Option<String>,
    split: Option<Split>,
}

/// Parses JSONL text into validated instances. Blank lines are skipped.
pub fn parse_dataset(text: &str, options: LoadOptions) -> Result<Vec<QAInstance>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(line, idx + 1, options)?);
    }
    Ok(out)
}

fn parse_record(line: &str, line_no: usize, options: LoadOptions) -> Result<QAInstance, DataError> {
    let raw: RawInstance = serde_json::from_str(line).map_err(|e| DataError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let id = raw.id.clone().unwrap_or_else(|| "<missing id>".to_string());
    let missing = |field: &str| DataError::Invalid {
        line: line_no,
        id: id.clone(),
        message: format!("missing field `{field}`"),
    };
    let wrong_context = match raw.wrong_context {
        Some(w) => w,
        None if !options.require_wrong_context => String::new(),
        None => return Err(missing("wrong_context")),
    };
    let instance = QAInstance {
        id: raw.id.ok_or_else(|| missing("id"))?,
        dataset: raw.dataset.ok_or_else(|| missing("dataset"))?,
        question: raw.question.ok_or_else(|| missing("question"))?,
        gold_answers: raw.gold_answers.ok_or_else(|| missing("gold_answers"))?,
        choices: raw.choices,
        correct_context: raw.correct_context.ok_or_else(|| missing("correct_context"))?,
        wrong_context,
        wrong_context_answer: raw.wrong_context_answer,
        split: raw.split.ok_or_else(|| missing("split"))?,
    };
    instance
        .validate_with(options.require_wrong_context)
        .map_err(|message| DataError::Invalid {
            line: line_no,
            id: instance.id.clone(),
            message,
        })?;
    Ok(instance)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAInstance>, DataError> {
    load_dataset_with(path, LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, options: LoadOptions) -> Result<Vec<QAInstance>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, idx + 1, options)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[QAInstance]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for instance in instances {
        let line = serde_json::to_string(instance).expect("instance serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn split_counts(instances: &[QAInstance]) -> BTreeMap<Split, usize> {
    let mut counts = BTreeMap::new();
    for instance in instances {
        *counts.entry(instance.split).or_insert(0) += 1;
    }
    counts
}

/// Each instance once with its correct context, then once with its incorrect one.
pub fn make_eval_pairs(instances: &[QAInstance]) -> Vec<(QAInstance, EvalCondition)> {
    instances
        .iter()
        .flat_map(|i| {
            [
                (i.clone(), EvalCondition::TrueContext),
                (i.clone(), EvalCondition::FalseContext),
            ]
        })
        .collect()
}

/// Draws a seeded, condition-balanced sample from the dev split.
///
/// Non-dev instances in the input are ignored. For odd sizes the extra entry
/// is a `TrueContext` one.
pub fn build_calibration_set(
    dev_instances: &[QAInstance],
    size: usize,
    seed: u64,
) -> Result<CalibrationSet, DataError> {
    let dev: Vec<&QAInstance> = dev_instances
        .iter()
        .filter(|i| i.split == Split::Dev)
        .collect();
    let n_true = size.div_ceil(2);
    let n_false = size / 2;
    if n_true > dev.len() {
        return Err(DataError::InsufficientDev {
            requested: size,
            needed: n_true,
            available: dev.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut true_order: Vec<usize> = (0..dev.len()).collect();
    let mut false_order = true_order.clone();
    true_order.shuffle(&mut rng);
    false_order.shuffle(&mut rng);

    let mut entries: Vec<(QAInstance, EvalCondition)> = true_order[..n_true]
        .iter()
        .map(|&i| (dev[i].clone(), EvalCondition::TrueContext))
        .chain(
            false_order[..n_false]
                .iter()
                .map(|&i| (dev[i].clone(), EvalCondition::FalseContext)),
        )
        .collect();
    entries.shuffle(&mut rng);
    Ok(CalibrationSet { entries, seed })
}

/// Rejection list for artifacts of LLM-written incorrect contexts.
pub const ARTIFACT_KEYWORDS: [&str; 4] = ["fake", "imaginary", "fictional", "hypothetical"];

pub fn has_artifact(text: &str) -> bool {
    let lower = text.to_lowercase();
    ARTIFACT_KEYWORDS.iter().any(|k| lower.contains(k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub max_attempts: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            temperature: 0.7,
            max_tokens: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedContext {
    pub context: String,
    pub attempts: usize,
}

/// Rejects a candidate that still entails a gold alias or carries an artifact keyword.
pub fn accept_synthesized(candidate: &str, gold_answers: &[String]) -> bool {
    !candidate.trim().is_empty()
        && !has_artifact(candidate)
        && !exact_match_relaxed(candidate, gold_answers)
}

/// Asks the backend to rewrite the correct context so it leads to a wrong answer.
pub fn synthesize_wrong_context(
    instance: &QAInstance,
    backend: &dyn Backend,
    templates: &TemplateSet,
    config: &SynthesisConfig,
) -> Result<SynthesizedContext, DataError> {
    if instance.correct_context.trim().is_empty() || instance.gold_answers.is_empty() {
        return Err(DataError::InvalidInstance {
            id: instance.id.clone(),
            message: "synthesis needs a correct context and gold answers".into(),
        });
    }
    let bindings = Bindings::new()
        .with("question", &instance.question)
        .with("document", &instance.correct_context)
        .with("gold_answer", &instance.gold_answers[0]);
    let messages = templates.render(TemplateName::ModifyContext, &bindings, 0)?;
    for attempt in 1..=config.max_attempts {
        let request = GenerationRequest::new(messages.clone())
            .temperature(config.temperature)
            .max_tokens(config.max_tokens)
            .seed(config.seed.wrapping_add(attempt as u64));
        let response = crate::backend::generate(backend, &request)?;
        let candidate = response.first_text().trim().to_string();
        if accept_synthesized(&candidate, &instance.gold_answers) {
            return Ok(SynthesizedContext {
                context: candidate,
                attempts: attempt,
            });
        }
        log::debug!("instance {}: synthesis attempt {attempt} rejected", instance.id);
    }
    Err(DataError::SynthesisExhausted {
        id: instance.id.clone(),
        attempts: config.max_attempts,
    })
}
