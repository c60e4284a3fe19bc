//! Decision pipelines and the rule selector.
//!
//! Baselines (closed-book, DIA, TACS-LR) and self-guided pipelines
//! (ImplicitSCR, ExplicitSCR) produce an answer directly. Rule-based methods
//! obtain an internal answer and a context answer, derive a verdict or
//! confidence for one or both, and let [`rule_select`] pick between them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, Backend, BackendError, GenerationRequest, TokenLogprob};
use crate::confidence::{
    self, answer_confidence, answer_span_logprobs, Artifact, ArtifactError, ArtifactFile,
    ArtifactKey, ConfidenceError, IsotonicMap, Orientation, PercentileReference,
    SelfConsistencyConfig, Source, TuneRecord,
};
use crate::correctness::{self, parse_leading_keyword, CorrectnessLabel, JudgeError, JudgePolicy};
use crate::datamodel::{EvalCondition, QAInstance};
use crate::prompts::{Bindings, PromptError, TemplateName, TemplateSet};

#[derive(Debug, Error)]
pub enum MethodError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("method `{method}`: {message}")]
    InvalidModifier { method: String, message: String },
    #[error("{stage}: completion has no answer text")]
    EmptyAnswer { stage: &'static str },
    #[error("{method} needs a context, but the condition is no_context")]
    NoContext { method: String },
    #[error("unparseable True/False verdict: {reply:?}")]
    UnparseableVerdict { reply: String },
    #[error("rule {rule} is missing input: {input}")]
    MissingInput { rule: Rule, input: &'static str },
    #[error("calibration artifact {file} is not loaded")]
    MissingArtifact { file: String },
    #[error("calibration artifact {file} has kind other than {expected}")]
    WrongArtifact { file: String, expected: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseMethod {
    ClosedBook,
    Dia,
    TacsLr,
    ImplicitScr,
    ExplicitScr,
    InternalEval,
    ContextEval,
    InternalConf,
    ContextConf,
    Tpc,
    Ctpc,
}

impl BaseMethod {
    pub const ALL: [BaseMethod; 11] = [
        BaseMethod::ClosedBook,
        BaseMethod::Dia,
        BaseMethod::TacsLr,
        BaseMethod::ImplicitScr,
        BaseMethod::ExplicitScr,
        BaseMethod::InternalEval,
        BaseMethod::ContextEval,
        BaseMethod::InternalConf,
        BaseMethod::ContextConf,
        BaseMethod::Tpc,
        BaseMethod::Ctpc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaseMethod::ClosedBook => "closed_book",
            BaseMethod::Dia => "dia",
            BaseMethod::TacsLr => "tacs_lr",
            BaseMethod::ImplicitScr => "implicit_scr",
            BaseMethod::ExplicitScr => "explicit_scr",
            BaseMethod::InternalEval => "internal_eval",
            BaseMethod::ContextEval => "context_eval",
            BaseMethod::InternalConf => "internal_conf",
            BaseMethod::ContextConf => "context_conf",
            BaseMethod::Tpc => "tpc",
            BaseMethod::Ctpc => "ctpc",
        }
    }
}

/// A method name plus its modifiers, e.g. `internal_conf+sc+tuned`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodId {
    pub base: BaseMethod,
    pub threshold_tuned: bool,
    pub isotonic_calibrated: bool,
    pub self_consistency: bool,
}

impl MethodId {
    pub const fn new(base: BaseMethod) -> Self {
        Self {
            base,
            threshold_tuned: false,
            isotonic_calibrated: false,
            self_consistency: false,
        }
    }

    pub fn is_rule_based(self) -> bool {
        matches!(
            self.base,
            BaseMethod::InternalEval
                | BaseMethod::ContextEval
                | BaseMethod::InternalConf
                | BaseMethod::ContextConf
                | BaseMethod::Tpc
                | BaseMethod::Ctpc
        )
    }

    /// Source whose confidence a threshold method inspects.
    pub fn threshold_source(self) -> Option<Source> {
        match self.base {
            BaseMethod::InternalConf => Some(Source::Internal),
            BaseMethod::ContextConf => Some(Source::Context),
            _ => None,
        }
    }

    /// Artifact name for an isotonic map: the confidence producer without
    /// the calibration and tuning flags.
    pub fn isotonic_artifact_method(self) -> String {
        MethodId {
            isotonic_calibrated: false,
            threshold_tuned: false,
            ..self
        }
        .to_string()
    }

    pub fn threshold_artifact_method(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base.as_str())?;
        if self.self_consistency {
            f.write_str("+sc")?;
        }
        if self.isotonic_calibrated {
            f.write_str("+isotonic")?;
        }
        if self.threshold_tuned {
            f.write_str("+tuned")?;
        }
        Ok(())
    }
}

impl FromStr for MethodId {
    type Err = MethodError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or("");
        let base = BaseMethod::ALL
            .into_iter()
            .find(|b| b.as_str() == head)
            .ok_or_else(|| MethodError::UnknownMethod(s.to_string()))?;
        let mut id = MethodId::new(base);
        let bad = |message: &str| MethodError::InvalidModifier {
            method: s.to_string(),
            message: message.to_string(),
        };
        for modifier in parts {
            let flag = match modifier {
                "tuned" => &mut id.threshold_tuned,
                "isotonic" => &mut id.isotonic_calibrated,
                "sc" => &mut id.self_consistency,
                "percentile" if id.base == BaseMethod::Tpc => {
                    id.base = BaseMethod::Ctpc;
                    continue;
                }
                "percentile" => return Err(bad("`+percentile` applies only to tpc")),
                other => return Err(bad(&format!("unknown modifier `{other}`"))),
            };
            if *flag {
                return Err(bad(&format!("modifier `{modifier}` repeated")));
            }
            *flag = true;
        }
        let flagged = id.threshold_tuned || id.isotonic_calibrated || id.self_consistency;
        if flagged && id.threshold_source().is_none() {
            return Err(bad("modifiers apply only to internal_conf and context_conf"));
        }
        Ok(id)
    }
}

impl Serialize for MethodId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One model generation and what was extracted from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub raw_text: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub source: Source,
    pub prompt_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Internal,
    Context,
    Blended,
}

impl From<Source> for DecisionSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Internal => DecisionSource::Internal,
            Source::Context => DecisionSource::Context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: String,
    /// Prompt digest for generation steps, rule inputs for the rule step.
    pub input: String,
    pub output: String,
}

impl TraceStep {
    fn new(step: &str, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            step: step.to_string(),
            input: input.into(),
            output: output.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub final_answer: String,
    pub source: DecisionSource,
    pub trace: Vec<TraceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<ConfidencePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EvalInternal,
    EvalContext,
    ThresholdInternal,
    ThresholdContext,
    CompareRaw,
    ComparePercentile,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::EvalInternal,
        Rule::EvalContext,
        Rule::ThresholdInternal,
        Rule::ThresholdContext,
        Rule::CompareRaw,
        Rule::ComparePercentile,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::EvalInternal => "eval_internal",
            Rule::EvalContext => "eval_context",
            Rule::ThresholdInternal => "threshold_internal",
            Rule::ThresholdContext => "threshold_context",
            Rule::CompareRaw => "compare_raw",
            Rule::ComparePercentile => "compare_percentile",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub rule: Rule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_reference: Option<PercentileReference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_reference: Option<PercentileReference>,
}

impl RuleSpec {
    pub fn eval_internal() -> Self {
        Self::bare(Rule::EvalInternal)
    }

    pub fn eval_context() -> Self {
        Self::bare(Rule::EvalContext)
    }

    pub fn threshold_internal(t: f64) -> Self {
        Self {
            threshold: Some(t),
            ..Self::bare(Rule::ThresholdInternal)
        }
    }

    pub fn threshold_context(t: f64) -> Self {
        Self {
            threshold: Some(t),
            ..Self::bare(Rule::ThresholdContext)
        }
    }

    pub fn compare_raw() -> Self {
        Self::bare(Rule::CompareRaw)
    }

    pub fn compare_percentile(internal: PercentileReference, context: PercentileReference) -> Self {
        Self {
            internal_reference: Some(internal),
            context_reference: Some(context),
            ..Self::bare(Rule::ComparePercentile)
        }
    }

    fn bare(rule: Rule) -> Self {
        Self {
            rule,
            threshold: None,
            internal_reference: None,
            context_reference: None,
        }
    }
}

/// Picks the internal or the context answer according to `spec`.
///
/// Eval rules read `verdict`; the others read the records' confidences.
/// Thresholds use strict `>`; comparison ties go to the internal answer.
pub fn rule_select(
    internal: &AnswerRecord,
    context: &AnswerRecord,
    spec: &RuleSpec,
    verdict: Option<bool>,
) -> Result<Decision, MethodError> {
    let rule = spec.rule;
    let missing = |input| MethodError::MissingInput { rule, input };
    let conf_i = || internal.confidence.ok_or_else(|| missing("internal confidence"));
    let conf_c = || context.confidence.ok_or_else(|| missing("context confidence"));
    let threshold = || spec.threshold.ok_or_else(|| missing("threshold"));

    let mut confidences = ConfidencePair::default();
    let (source, inputs) = match rule {
        Rule::EvalInternal => {
            let v = verdict.ok_or_else(|| missing("verdict"))?;
            let s = if v { Source::Internal } else { Source::Context };
            (s, format!("verdict={v}"))
        }
        Rule::EvalContext => {
            let v = verdict.ok_or_else(|| missing("verdict"))?;
            let s = if v { Source::Context } else { Source::Internal };
            (s, format!("verdict={v}"))
        }
        Rule::ThresholdInternal => {
            let (c, t) = (conf_i()?, threshold()?);
            confidences.internal = Some(c);
            let s = if c > t { Source::Internal } else { Source::Context };
            (s, format!("internal={c} threshold={t}"))
        }
        Rule::ThresholdContext => {
            let (c, t) = (conf_c()?, threshold()?);
            confidences.context = Some(c);
            let s = if c > t { Source::Context } else { Source::Internal };
            (s, format!("context={c} threshold={t}"))
        }
        Rule::CompareRaw => {
            let (i, c) = (conf_i()?, conf_c()?);
            confidences = ConfidencePair {
                internal: Some(i),
                context: Some(c),
            };
            let s = if c > i { Source::Context } else { Source::Internal };
            (s, format!("internal={i} context={c}"))
        }
        Rule::ComparePercentile => {
            let (i, c) = (conf_i()?, conf_c()?);
            let ri = spec
                .internal_reference
                .as_ref()
                .ok_or_else(|| missing("internal percentile reference"))?;
            let rc = spec
                .context_reference
                .as_ref()
                .ok_or_else(|| missing("context percentile reference"))?;
            let (pi, pc) = (ri.percentile(i)?, rc.percentile(c)?);
            confidences = ConfidencePair {
                internal: Some(i),
                context: Some(c),
            };
            let s = if pc > pi { Source::Context } else { Source::Internal };
            (
                s,
                format!("internal={i} context={c} internal_pct={pi} context_pct={pc}"),
            )
        }
    };
    let chosen = match source {
        Source::Internal => internal,
        Source::Context => context,
    };
    let has_conf = confidences.internal.is_some() || confidences.context.is_some();
    Ok(Decision {
        final_answer: chosen.answer.clone(),
        source: source.into(),
        trace: vec![TraceStep::new(
            "rule",
            format!("{rule} {inputs}"),
            source.as_str(),
        )],
        confidences: has_conf.then_some(confidences),
    })
}

/// First non-empty line with any leading `Answer:` label removed.
pub fn extract_answer(text: &str) -> Option<String> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let answer = strip_label(line, &["answer:"]).trim();
    (!answer.is_empty()).then(|| answer.to_string())
}

/// Last non-empty line with markup and a final-answer label removed.
pub fn extract_final_line(text: &str) -> Option<String> {
    let line = text.lines().map(str::trim).rev().find(|l| {
        !l.trim_matches(|c: char| c.is_whitespace() || is_markup(c)).is_empty()
    })?;
    let line = line.trim_matches(|c: char| c.is_whitespace() || is_markup(c));
    let line = strip_label(
        line,
        &[
            "therefore, the final answer is:",
            "the final answer is:",
            "final answer:",
            "answer:",
        ],
    );
    let answer = line.trim_matches(|c: char| c.is_whitespace() || is_markup(c));
    (!answer.is_empty()).then(|| answer.to_string())
}

fn is_markup(c: char) -> bool {
    matches!(c, '*' | '_' | '`' | '#' | '>' | '"')
}

fn strip_label<'a>(line: &'a str, labels: &[&str]) -> &'a str {
    let lower = line.to_lowercase();
    for label in labels {
        if lower.starts_with(label) && line.is_char_boundary(label.len()) {
            return line[label.len()..].trim_start_matches(|c: char| c.is_whitespace() || is_markup(c));
        }
    }
    line
}

/// Splits text into trimmed sentences ending at `.`, `!` or `?` followed by
/// whitespace or the end of the text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let ends = matches!(c, '.' | '!' | '?')
            && chars.peek().map_or(true, |n| n.is_whitespace());
        if ends {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// True when `filtered` keeps a subsequence of `original`'s sentences and
/// adds or rewrites nothing.
pub fn is_removal_only(original: &str, filtered: &str) -> bool {
    let orig = split_sentences(original);
    let mut it = orig.iter();
    split_sentences(filtered)
        .iter()
        .all(|s| it.by_ref().any(|o| o == s))
}

/// Parses a leading True/False verdict.
pub fn parse_true_false(reply: &str) -> Result<bool, MethodError> {
    parse_leading_keyword(reply, &[("true", true), ("false", false)]).ok_or_else(|| {
        MethodError::UnparseableVerdict {
            reply: reply.to_string(),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub answer_max_tokens: u32,
    pub reasoning_max_tokens: u32,
    pub verdict_max_tokens: u32,
    pub filter_max_tokens: u32,
    pub default_threshold: f64,
    pub self_consistency: SelfConsistencyConfig,
    pub seed: Option<u64>,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            answer_max_tokens: 64,
            reasoning_max_tokens: 1024,
            verdict_max_tokens: 8,
            filter_max_tokens: 1024,
            default_threshold: 0.5,
            self_consistency: SelfConsistencyConfig::default(),
            seed: None,
        }
    }
}

/// Calibration artifacts held in memory, keyed by (dataset, method, source).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationStore {
    artifacts: BTreeMap<ArtifactKey, Artifact>,
}

impl CalibrationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads every `*.json` artifact file in `dir`. A missing directory
    /// yields an empty store.
    pub fn load_dir(dir: &Path) -> Result<Self, ArtifactError> {
        let mut store = Self::new();
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(store),
            Err(source) => {
                return Err(ArtifactError::Io {
                    path: dir.to_path_buf(),
                    source,
                })
            }
        };
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|source| ArtifactError::Io {
                path: path.clone(),
                source,
            })?;
            let file: ArtifactFile = serde_json::from_str(&text)
                .map_err(|source| ArtifactError::Json { path, source })?;
            store.insert(file.key, file.artifact);
        }
        Ok(store)
    }

    pub fn insert(&mut self, key: ArtifactKey, artifact: Artifact) {
        self.artifacts.insert(key, artifact);
    }

    pub fn get(&self, key: &ArtifactKey) -> Option<&Artifact> {
        self.artifacts.get(key)
    }

    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    fn require(&self, key: &ArtifactKey) -> Result<&Artifact, MethodError> {
        self.get(key).ok_or_else(|| MethodError::MissingArtifact {
            file: key.file_name(),
        })
    }

    pub fn threshold(&self, key: &ArtifactKey) -> Result<f64, MethodError> {
        match self.require(key)? {
            Artifact::Threshold { threshold, .. } => Ok(*threshold),
            _ => Err(MethodError::WrongArtifact {
                file: key.file_name(),
                expected: "threshold",
            }),
        }
    }

    pub fn isotonic(&self, key: &ArtifactKey) -> Result<&IsotonicMap, MethodError> {
        match self.require(key)? {
            Artifact::Isotonic(m) => Ok(m),
            _ => Err(MethodError::WrongArtifact {
                file: key.file_name(),
                expected: "isotonic",
            }),
        }
    }

    pub fn percentile(&self, key: &ArtifactKey) -> Result<&PercentileReference, MethodError> {
        match self.require(key)? {
            Artifact::Percentile(p) => Ok(p),
            _ => Err(MethodError::WrongArtifact {
                file: key.file_name(),
                expected: "percentile",
            }),
        }
    }
}

/// Everything a pipeline needs besides the instance.
pub struct Engine<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a TemplateSet,
    pub settings: GenerationSettings,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn Backend, templates: &'a TemplateSet) -> Self {
        Self {
            backend,
            templates,
            settings: GenerationSettings::default(),
        }
    }

    fn request(&self, name: TemplateName, bindings: &Bindings, max_tokens: u32) -> Result<GenerationRequest, MethodError> {
        let messages = self.templates.render(name, bindings, 0)?;
        let mut req = GenerationRequest::new(messages)
            .temperature(self.settings.temperature)
            .max_tokens(max_tokens);
        if let Some(seed) = self.settings.seed {
            req = req.seed(seed);
        }
        Ok(req)
    }

    fn answer_record(
        &self,
        req: GenerationRequest,
        source: Source,
        stage: &'static str,
    ) -> Result<AnswerRecord, MethodError> {
        let resp = backend::generate(self.backend, &req)?;
        let sample = &resp.samples[0];
        let answer = extract_answer(&sample.text).ok_or(MethodError::EmptyAnswer { stage })?;
        let confidence = match &sample.logprobs {
            Some(lps) if !lps.is_empty() => {
                Some(answer_confidence(&answer_span_logprobs(lps, &answer))?)
            }
            _ => None,
        };
        Ok(AnswerRecord {
            raw_text: sample.text.clone(),
            answer,
            logprobs: sample.logprobs.clone(),
            confidence,
            source,
            prompt_digest: req.prompt_digest(),
        })
    }

    fn closed_book_request(&self, instance: &QAInstance) -> Result<GenerationRequest, MethodError> {
        let b = Bindings::new().with("question", &instance.question);
        Ok(self
            .request(TemplateName::ClosedBook, &b, self.settings.answer_max_tokens)?
            .logprobs(true))
    }

    fn context_request(&self, instance: &QAInstance, document: &str) -> Result<GenerationRequest, MethodError> {
        let b = Bindings::new()
            .with("question", &instance.question)
            .with("document", document);
        Ok(self
            .request(TemplateName::ContextFaithfulAnswer, &b, self.settings.answer_max_tokens)?
            .logprobs(true))
    }

    /// The internal answer a_in: closed-book generation with logprobs.
    pub fn run_closed_book(&self, instance: &QAInstance) -> Result<AnswerRecord, MethodError> {
        let req = self.closed_book_request(instance)?;
        self.answer_record(req, Source::Internal, "closed_book")
    }

    /// The answer produced when told to follow the context faithfully.
    pub fn run_context_answer(
        &self,
        instance: &QAInstance,
        condition: EvalCondition,
    ) -> Result<AnswerRecord, MethodError> {
        let document = context_of(instance, condition, "context_answer")?;
        let req = self.context_request(instance, document)?;
        self.answer_record(req, Source::Context, "context_answer")
    }

    fn single_prompt(
        &self,
        name: TemplateName,
        step: &'static str,
        instance: &QAInstance,
        document: &str,
    ) -> Result<Decision, MethodError> {
        let b = Bindings::new()
            .with("question", &instance.question)
            .with("document", document);
        let req = self.request(name, &b, self.settings.answer_max_tokens)?;
        let rec = self.answer_record(req, Source::Context, step)?;
        Ok(Decision {
            final_answer: rec.answer.clone(),
            source: DecisionSource::Blended,
            trace: vec![TraceStep::new(step, rec.prompt_digest, rec.raw_text)],
            confidences: None,
        })
    }

    pub fn run_dia(&self, instance: &QAInstance, condition: EvalCondition) -> Result<Decision, MethodError> {
        let document = context_of(instance, condition, "dia")?;
        self.single_prompt(TemplateName::Dia, "dia", instance, document)
    }

    pub fn run_implicit_scr(
        &self,
        instance: &QAInstance,
        condition: EvalCondition,
    ) -> Result<Decision, MethodError> {
        let document = context_of(instance, condition, "implicit_scr")?;
        self.single_prompt(TemplateName::ImplicitScr, "implicit_scr", instance, document)
    }

    /// Filters untruthful sentences, then answers with DIA on what remains.
    pub fn run_tacs_lr(&self, instance: &QAInstance, condition: EvalCondition) -> Result<Decision, MethodError> {
        let original = context_of(instance, condition, "tacs_lr")?;
        let b = Bindings::new()
            .with("question", &instance.question)
            .with("document", original);
        let req = self.request(TemplateName::FilterContext, &b, self.settings.filter_max_tokens)?;
        let resp = backend::generate(self.backend, &req)?;
        let reply = resp.first_text().trim();
        let reply = reply
            .strip_prefix("Filtered Document:")
            .map(str::trim)
            .unwrap_or(reply);
        let mut trace = vec![TraceStep::new("filter_context", req.prompt_digest(), reply)];
        let document = if reply.is_empty() || !is_removal_only(original, reply) {
            log::warn!(
                "instance {}: filtered context is not a removal of the original; using the original",
                instance.id
            );
            trace.push(TraceStep::new("removal_check", "removal_only=false", "original context used"));
            original
        } else {
            reply
        };
        let dia = self.single_prompt(TemplateName::Dia, "dia", instance, document)?;
        trace.extend(dia.trace);
        Ok(Decision { trace, ..dia })
    }

    /// Internal answer, context answer, then a chain-of-thought judgment whose
    /// last line is the final answer.
    pub fn run_explicit_scr(
        &self,
        instance: &QAInstance,
        condition: EvalCondition,
    ) -> Result<Decision, MethodError> {
        let document = context_of(instance, condition, "explicit_scr")?;
        let internal = self.run_closed_book(instance)?;
        let context = self.run_context_answer(instance, condition)?;
        let b = Bindings::new()
            .with("question", &instance.question)
            .with("internal_answer", &internal.answer)
            .with("document", document)
            .with("doc_answer", &context.answer);
        let req = self.request(TemplateName::ExplicitScr, &b, self.settings.reasoning_max_tokens)?;
        let resp = backend::generate(self.backend, &req)?;
        let reply = resp.first_text();
        let final_answer =
            extract_final_line(reply).ok_or(MethodError::EmptyAnswer { stage: "explicit_scr" })?;
        Ok(Decision {
            final_answer,
            source: DecisionSource::Blended,
            trace: vec![
                TraceStep::new("closed_book", internal.prompt_digest, internal.raw_text),
                TraceStep::new("context_answer", context.prompt_digest, context.raw_text),
                TraceStep::new("explicit_scr", req.prompt_digest(), reply),
            ],
            confidences: None,
        })
    }

    fn verdict(&self, name: TemplateName, bindings: &Bindings) -> Result<(bool, TraceStep), MethodError> {
        let req = self.request(name, bindings, self.settings.verdict_max_tokens)?;
        let resp = backend::generate(self.backend, &req)?;
        let v = parse_true_false(resp.first_text())?;
        Ok((v, TraceStep::new(name.as_str(), req.prompt_digest(), resp.first_text())))
    }

    /// Fraction of high-temperature resamples agreeing with `record.answer`.
    fn self_consistency(&self, req: &GenerationRequest, record: &AnswerRecord) -> Result<f64, MethodError> {
        let sc = self.settings.self_consistency;
        let req = GenerationRequest {
            temperature: sc.temperature,
            want_logprobs: false,
            ..req.clone()
        };
        let resp = backend::sample_n(self.backend, &req, sc.samples)?;
        let answers: Vec<String> = resp
            .texts()
            .iter()
            .map(|t| extract_answer(t).unwrap_or_default())
            .collect();
        Ok(confidence::self_consistency(&answers, &record.answer))
    }

    /// The raw confidence a threshold method uses for `source`: sequence
    /// probability, or self-consistency when the method asks for it.
    pub fn raw_confidence(
        &self,
        method: MethodId,
        instance: &QAInstance,
        condition: EvalCondition,
        record: &AnswerRecord,
    ) -> Result<f64, MethodError> {
        if method.self_consistency {
            let req = match record.source {
                Source::Internal => self.closed_book_request(instance)?,
                Source::Context => {
                    self.context_request(instance, context_of(instance, condition, "context_conf")?)?
                }
            };
            return self.self_consistency(&req, record);
        }
        record.confidence.ok_or(MethodError::MissingInput {
            rule: Rule::ThresholdInternal,
            input: "answer logprobs",
        })
    }

    /// Runs `method` on one evaluation pair.
    pub fn run_method(
        &self,
        method: MethodId,
        instance: &QAInstance,
        condition: EvalCondition,
        store: &CalibrationStore,
    ) -> Result<Decision, MethodError> {
        match method.base {
            BaseMethod::ClosedBook => {
                let rec = self.run_closed_book(instance)?;
                return Ok(Decision {
                    final_answer: rec.answer.clone(),
                    source: DecisionSource::Internal,
                    trace: vec![TraceStep::new("closed_book", rec.prompt_digest, rec.raw_text)],
                    confidences: rec.confidence.map(|c| ConfidencePair {
                        internal: Some(c),
                        context: None,
                    }),
                });
            }
            BaseMethod::Dia => return self.run_dia(instance, condition),
            BaseMethod::TacsLr => return self.run_tacs_lr(instance, condition),
            BaseMethod::ImplicitScr => return self.run_implicit_scr(instance, condition),
            BaseMethod::ExplicitScr => return self.run_explicit_scr(instance, condition),
            _ => {}
        }

        let name = method.to_string();
        let document = context_of(instance, condition, &name)?;
        let key = |m: String, s: Source| ArtifactKey::new(&instance.dataset, &m, s);
        // Fail on missing artifacts before spending any generation calls.
        let spec = match method.base {
            BaseMethod::InternalEval => RuleSpec::eval_internal(),
            BaseMethod::ContextEval => RuleSpec::eval_context(),
            BaseMethod::Tpc => RuleSpec::compare_raw(),
            BaseMethod::Ctpc => RuleSpec::compare_percentile(
                store.percentile(&key(name.clone(), Source::Internal))?.clone(),
                store.percentile(&key(name.clone(), Source::Context))?.clone(),
            ),
            BaseMethod::InternalConf | BaseMethod::ContextConf => {
                let source = method.threshold_source().expect("threshold method");
                let t = if method.threshold_tuned {
                    store.threshold(&key(method.threshold_artifact_method(), source))?
                } else {
                    self.settings.default_threshold
                };
                if method.isotonic_calibrated {
                    store.isotonic(&key(method.isotonic_artifact_method(), source))?;
                }
                match source {
                    Source::Internal => RuleSpec::threshold_internal(t),
                    Source::Context => RuleSpec::threshold_context(t),
                }
            }
            _ => unreachable!("non-rule methods returned above"),
        };

        let mut internal = self.run_closed_book(instance)?;
        let mut context = self.run_context_answer(instance, condition)?;
        let mut trace = vec![
            TraceStep::new("closed_book", internal.prompt_digest.clone(), internal.raw_text.clone()),
            TraceStep::new("context_answer", context.prompt_digest.clone(), context.raw_text.clone()),
        ];
        let mut verdict = None;
        match method.base {
            BaseMethod::InternalEval => {
                let b = Bindings::new()
                    .with("question", &instance.question)
                    .with("model_answer", &internal.answer);
                let (v, step) = self.verdict(TemplateName::InternalEval, &b)?;
                verdict = Some(v);
                trace.push(step);
            }
            BaseMethod::ContextEval => {
                let b = Bindings::new()
                    .with("question", &instance.question)
                    .with("document", document);
                let (v, step) = self.verdict(TemplateName::ContextEval, &b)?;
                verdict = Some(v);
                trace.push(step);
            }
            BaseMethod::InternalConf | BaseMethod::ContextConf => {
                let source = method.threshold_source().expect("threshold method");
                let record = match source {
                    Source::Internal => &mut internal,
                    Source::Context => &mut context,
                };
                let mut c = self.raw_confidence(method, instance, condition, record)?;
                if method.isotonic_calibrated {
                    let map = store.isotonic(&key(method.isotonic_artifact_method(), source))?;
                    c = map.apply(c);
                }
                record.confidence = Some(c);
            }
            _ => {}
        }
        let decision = rule_select(&internal, &context, &spec, verdict)?;
        trace.extend(decision.trace);
        Ok(Decision { trace, ..decision })
    }

    /// Internal and context answers plus their correctness, for calibration.
    pub fn calibration_outcome(
        &self,
        method: MethodId,
        instance: &QAInstance,
        condition: EvalCondition,
        policy: &JudgePolicy,
    ) -> Result<CalibrationOutcome, MethodError> {
        let internal = self.run_closed_book(instance)?;
        let context = self.run_context_answer(instance, condition)?;
        let judge = |answer: &str| -> Result<CorrectnessLabel, MethodError> {
            Ok(correctness::judge(instance, answer, policy, Some(self.backend), self.templates)?)
        };
        let internal_correct = judge(&internal.answer)?.correct;
        let context_correct = judge(&context.answer)?.correct;
        let mut raw = ConfidencePair::default();
        if let Some(source) = method.threshold_source() {
            let record = match source {
                Source::Internal => &internal,
                Source::Context => &context,
            };
            let c = self.raw_confidence(method, instance, condition, record)?;
            match source {
                Source::Internal => raw.internal = Some(c),
                Source::Context => raw.context = Some(c),
            }
        } else {
            raw = ConfidencePair {
                internal: internal.confidence,
                context: context.confidence,
            };
        }
        Ok(CalibrationOutcome {
            condition,
            internal_correct,
            context_correct,
            raw,
        })
    }
}

fn context_of<'i>(
    instance: &'i QAInstance,
    condition: EvalCondition,
    method: &str,
) -> Result<&'i str, MethodError> {
    instance
        .context_for(condition)
        .ok_or_else(|| MethodError::NoContext {
            method: method.to_string(),
        })
}

/// One calibration-set pair after generation and judging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOutcome {
    pub condition: EvalCondition,
    pub internal_correct: bool,
    pub context_correct: bool,
    pub raw: ConfidencePair,
}

fn source_conf(o: &CalibrationOutcome, source: Source) -> Result<f64, MethodError> {
    match source {
        Source::Internal => o.raw.internal,
        Source::Context => o.raw.context,
    }
    .ok_or(MethodError::MissingInput {
        rule: Rule::ComparePercentile,
        input: "calibration confidence",
    })
}

/// Isotonic map from a source's raw confidence to that source's correctness.
pub fn fit_isotonic(outcomes: &[CalibrationOutcome], source: Source) -> Result<IsotonicMap, MethodError> {
    let pairs = outcomes
        .iter()
        .map(|o| {
            let y = match source {
                Source::Internal => o.internal_correct,
                Source::Context => o.context_correct,
            };
            Ok((source_conf(o, source)?, y))
        })
        .collect::<Result<Vec<_>, MethodError>>()?;
    Ok(IsotonicMap::fit(&pairs)?)
}

pub fn fit_percentile(outcomes: &[CalibrationOutcome], source: Source) -> Result<PercentileReference, MethodError> {
    let scores = outcomes
        .iter()
        .map(|o| source_conf(o, source))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PercentileReference::new(scores)?)
}

/// Tunes the threshold of `method` by replaying its rule over the outcomes,
/// applying `isotonic` to the confidences first when given.
pub fn fit_threshold(
    method: MethodId,
    outcomes: &[CalibrationOutcome],
    isotonic: Option<&IsotonicMap>,
) -> Result<(f64, Orientation), MethodError> {
    let source = method.threshold_source().ok_or_else(|| MethodError::InvalidModifier {
        method: method.to_string(),
        message: "only threshold methods can be tuned".into(),
    })?;
    let orientation = match source {
        Source::Internal => Orientation::Internal,
        Source::Context => Orientation::Context,
    };
    let records = outcomes
        .iter()
        .map(|o| {
            let raw = source_conf(o, source)?;
            Ok(TuneRecord {
                confidence: isotonic.map_or(raw, |m| m.apply(raw)),
                condition: o.condition,
                internal_correct: o.internal_correct,
                context_correct: o.context_correct,
            })
        })
        .collect::<Result<Vec<_>, MethodError>>()?;
    Ok((confidence::tune_threshold(&records, orientation)?, orientation))
}
