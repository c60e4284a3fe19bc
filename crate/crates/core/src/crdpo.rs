//! CR-DPO preference data.
//!
//! For each evaluation pair where the internal answer and the context
//! disagree in correctness, the model is told the truth about which side is
//! right and samples a reasoning path (chosen), then is told the opposite and
//! samples another (rejected). Two pairs are drawn per instance with
//! different prompt variants; a chosen path is kept only when the gold answer
//! appears near its end.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, GenerationRequest};
use crate::correctness::{
    self, token_recall_tail, CorrectnessLabel, JudgePolicy, DEFAULT_RECALL_THRESHOLD,
    DEFAULT_WINDOW_MULT,
};
use crate::datamodel::{make_eval_pairs, EvalCondition, QAInstance};
use crate::methods::{Engine, MethodError};
use crate::prompts::{Bindings, TemplateName};

#[derive(Debug, Error)]
pub enum CrdpoError {
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error("no preference pairs to write")]
    NoPairs,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("train config: {0}")]
    Config(String),
}

impl From<backend::BackendError> for CrdpoError {
    fn from(e: backend::BackendError) -> Self {
        CrdpoError::Method(e.into())
    }
}

impl From<crate::prompts::PromptError> for CrdpoError {
    fn from(e: crate::prompts::PromptError) -> Self {
        CrdpoError::Method(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    InternalWrongContextRight,
    InternalRightContextWrong,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::InternalWrongContextRight => "internal_wrong_context_right",
            Pattern::InternalRightContextWrong => "internal_right_context_wrong",
        }
    }

    /// Template whose role assignment matches the ground truth.
    pub fn chosen_template(self) -> TemplateName {
        match self {
            Pattern::InternalWrongContextRight => TemplateName::CrdpoDocCorrect,
            Pattern::InternalRightContextWrong => TemplateName::CrdpoDocDeceptive,
        }
    }

    /// Template that lies to the model about which side is right.
    pub fn rejected_template(self) -> TemplateName {
        match self {
            Pattern::InternalWrongContextRight => TemplateName::CrdpoDocDeceptive,
            Pattern::InternalRightContextWrong => TemplateName::CrdpoDocCorrect,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The conflict quadrant an evaluation pair falls in, if any.
pub fn classify_pattern(internal: &CorrectnessLabel, condition: EvalCondition) -> Option<Pattern> {
    match (internal.correct, condition) {
        (false, EvalCondition::TrueContext) => Some(Pattern::InternalWrongContextRight),
        (true, EvalCondition::FalseContext) => Some(Pattern::InternalRightContextWrong),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instance_id: String,
    pub dataset: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub variant: u32,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairMeta {
    instance: String,
    dataset: String,
    pattern: Pattern,
    variant: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairLine {
    prompt: String,
    chosen: String,
    rejected: String,
    meta: PairMeta,
}

impl PreferencePair {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&PairLine {
            prompt: self.prompt.clone(),
            chosen: self.chosen.clone(),
            rejected: self.rejected.clone(),
            meta: PairMeta {
                instance: self.instance_id.clone(),
                dataset: self.dataset.clone(),
                pattern: self.pattern,
                variant: self.variant,
            },
        })
        .expect("pair serializes")
    }
}

/// Parses a preference-pair JSONL file. Blank lines are skipped.
pub fn parse_pairs_jsonl(text: &str) -> Result<Vec<PreferencePair>, CrdpoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: PairLine = serde_json::from_str(line).map_err(|e| CrdpoError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(PreferencePair {
            instance_id: l.meta.instance,
            dataset: l.meta.dataset,
            prompt: l.prompt,
            chosen: l.chosen,
            rejected: l.rejected,
            variant: l.meta.variant,
            pattern: l.meta.pattern,
        });
    }
    Ok(out)
}

/// True when any gold alias passes the tail token-recall check.
pub fn validate_chosen(path: &str, gold_answers: &[String]) -> bool {
    gold_answers.iter().any(|g| {
        token_recall_tail(path, g, DEFAULT_WINDOW_MULT, DEFAULT_RECALL_THRESHOLD).pass
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrdpoConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    /// Also sample pairs where internal and context answers agree.
    pub include_agreement: bool,
}

impl Default for CrdpoConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            max_tokens: 1024,
            seed: 0,
            include_agreement: false,
        }
    }
}

/// Internal and context answers one pair is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputs<'a> {
    pub instance: &'a QAInstance,
    pub condition: EvalCondition,
    pub internal_answer: &'a str,
    pub context_answer: &'a str,
}

impl PairInputs<'_> {
    fn bindings(&self) -> Result<Bindings, CrdpoError> {
        let document = self.instance.context_for(self.condition).ok_or_else(|| {
            CrdpoError::Method(MethodError::NoContext {
                method: "crdpo".into(),
            })
        })?;
        Ok(Bindings::new()
            .with("question", &self.instance.question)
            .with("internal_answer", self.internal_answer)
            .with("document", document)
            .with("doc_answer", self.context_answer))
    }
}

fn sample(
    engine: &Engine<'_>,
    name: TemplateName,
    bindings: &Bindings,
    variant: u32,
    seed: u64,
    config: &CrdpoConfig,
) -> Result<String, CrdpoError> {
    let messages = engine.templates.render(name, bindings, variant)?;
    let req = GenerationRequest::new(messages)
        .temperature(config.temperature)
        .max_tokens(config.max_tokens)
        .seed(seed);
    Ok(backend::generate(engine.backend, &req)?.first_text().to_string())
}

/// Samples one chosen/rejected pair with exemplar variant `variant`.
///
/// If the two paths come back identical the rejected path is resampled once
/// with a fresh seed; a second collision skips the pair.
pub fn sample_pair(
    engine: &Engine<'_>,
    inputs: &PairInputs<'_>,
    pattern: Pattern,
    variant: u32,
    config: &CrdpoConfig,
) -> Result<Option<PreferencePair>, CrdpoError> {
    let b = inputs.bindings()?;
    let seed = config.seed.wrapping_add(variant as u64);
    let chosen = sample(engine, pattern.chosen_template(), &b, variant, seed, config)?;
    let mut rejected = sample(engine, pattern.rejected_template(), &b, variant, seed, config)?;
    if rejected.trim() == chosen.trim() {
        let reseed = seed.wrapping_add(1_000_003);
        rejected = sample(engine, pattern.rejected_template(), &b, variant, reseed, config)?;
        if rejected.trim() == chosen.trim() {
            log::warn!(
                "instance {}: chosen and rejected paths identical after resampling; skipping variant {variant}",
                inputs.instance.id
            );
            return Ok(None);
        }
    }
    let prompt = engine
        .templates
        .render_text(TemplateName::ExplicitScr, &b, 0)?;
    Ok(Some(PreferencePair {
        instance_id: inputs.instance.id.clone(),
        dataset: inputs.instance.dataset.clone(),
        prompt,
        chosen,
        rejected,
        variant,
        pattern,
    }))
}

/// One pair per prompt variant; pairs whose chosen path fails validation are
/// dropped individually.
pub fn dual_sample(
    engine: &Engine<'_>,
    inputs: &PairInputs<'_>,
    pattern: Pattern,
    config: &CrdpoConfig,
) -> Result<Vec<PreferencePair>, CrdpoError> {
    let mut out = Vec::new();
    for variant in 0..2 {
        let Some(pair) = sample_pair(engine, inputs, pattern, variant, config)? else {
            continue;
        };
        if validate_chosen(&pair.chosen, &inputs.instance.gold_answers) {
            out.push(pair);
        } else {
            log::info!(
                "instance {} variant {variant}: chosen path fails the recall filter",
                inputs.instance.id
            );
        }
    }
    if out.is_empty() {
        log::info!("instance {}: no valid preference pairs", inputs.instance.id);
    }
    Ok(out)
}

/// Runs the whole generation for `instances`: internal answer and its label,
/// context answer, quadrant classification, dual sampling.
pub fn generate_pairs(
    engine: &Engine<'_>,
    instances: &[QAInstance],
    policy: &JudgePolicy,
    config: &CrdpoConfig,
) -> Result<Vec<PreferencePair>, CrdpoError> {
    let mut out = Vec::new();
    for (instance, condition) in make_eval_pairs(instances) {
        out.extend(pairs_for(engine, &instance, condition, policy, config)?);
    }
    Ok(out)
}

/// Pairs for a single evaluation pair; empty outside the conflict quadrants.
pub fn pairs_for(
    engine: &Engine<'_>,
    instance: &QAInstance,
    condition: EvalCondition,
    policy: &JudgePolicy,
    config: &CrdpoConfig,
) -> Result<Vec<PreferencePair>, CrdpoError> {
    let internal = engine.run_closed_book(instance)?;
    let label = correctness::judge(
        instance,
        &internal.answer,
        policy,
        Some(engine.backend),
        engine.templates,
    )
    .map_err(MethodError::from)?;
    let pattern = match classify_pattern(&label, condition) {
        Some(p) => p,
        None if config.include_agreement => match condition {
            EvalCondition::TrueContext => Pattern::InternalWrongContextRight,
            EvalCondition::FalseContext => Pattern::InternalRightContextWrong,
            EvalCondition::NoContext => return Ok(Vec::new()),
        },
        None => return Ok(Vec::new()),
    };
    let context = engine.run_context_answer(instance, condition)?;
    let inputs = PairInputs {
        instance,
        condition,
        internal_answer: &internal.answer,
        context_answer: &context.answer,
    };
    dual_sample(engine, &inputs, pattern, config)
}

/// DPO/LoRA hyperparameters written next to the pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub per_device_train_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub num_train_epochs: u32,
    pub warmup_steps: u32,
    pub max_length: u32,
    pub max_prompt_length: u32,
    pub beta: f64,
    pub loss_type: String,
    pub rpo_alpha: f64,
    pub lora_r: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-6,
            max_grad_norm: 0.3,
            per_device_train_batch_size: 1,
            gradient_accumulation_steps: 4,
            num_train_epochs: 5,
            warmup_steps: 100,
            max_length: 900,
            max_prompt_length: 600,
            beta: 0.1,
            loss_type: "sigmoid".to_string(),
            rpo_alpha: 1.0,
            lora_r: 8,
            lora_alpha: 16,
            lora_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CrdpoError> {
        let reals = [
            ("learning_rate", self.learning_rate),
            ("max_grad_norm", self.max_grad_norm),
            ("beta", self.beta),
            ("rpo_alpha", self.rpo_alpha),
            ("lora_dropout", self.lora_dropout),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(CrdpoError::Config(format!("{name} must be positive")));
            }
        }
        let ints = [
            ("per_device_train_batch_size", self.per_device_train_batch_size),
            ("gradient_accumulation_steps", self.gradient_accumulation_steps),
            ("num_train_epochs", self.num_train_epochs),
            ("warmup_steps", self.warmup_steps),
            ("max_length", self.max_length),
            ("max_prompt_length", self.max_prompt_length),
            ("lora_r", self.lora_r),
            ("lora_alpha", self.lora_alpha),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(CrdpoError::Config(format!("{name} must be positive")));
            }
        }
        if self.max_prompt_length >= self.max_length {
            return Err(CrdpoError::Config(
                "max_prompt_length must be below max_length".into(),
            ));
        }
        if self.loss_type.trim().is_empty() {
            return Err(CrdpoError::Config("loss_type is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CrdpoError> {
        let c: Self = toml::from_str(text).map_err(|e| CrdpoError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub by_pattern: BTreeMap<String, usize>,
    pub by_dataset: BTreeMap<String, usize>,
    pub by_variant: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn from_pairs(pairs: &[PreferencePair]) -> Self {
        let mut m = Manifest {
            total: pairs.len(),
            by_pattern: BTreeMap::new(),
            by_dataset: BTreeMap::new(),
            by_variant: BTreeMap::new(),
        };
        for p in pairs {
            *m.by_pattern.entry(p.pattern.to_string()).or_default() += 1;
            *m.by_dataset.entry(p.dataset.clone()).or_default() += 1;
            *m.by_variant.entry(p.variant.to_string()).or_default() += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundlePaths {
    pub pairs: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
}

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const CONFIG_FILE: &str = "train_config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `pairs.jsonl`, `train_config.toml` and `manifest.json` to `out_dir`.
pub fn emit_training_bundle(
    pairs: &[PreferencePair],
    out_dir: &Path,
    config: &TrainConfig,
) -> Result<BundlePaths, CrdpoError> {
    if pairs.is_empty() {
        return Err(CrdpoError::NoPairs);
    }
    config.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CrdpoError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let paths = BundlePaths {
        pairs: out_dir.join(PAIRS_FILE),
        config: out_dir.join(CONFIG_FILE),
        manifest: out_dir.join(MANIFEST_FILE),
    };
    let mut jsonl = String::new();
    for p in pairs {
        jsonl.push_str(&p.to_json_line());
        jsonl.push('\n');
    }
    fs::write(&paths.pairs, jsonl).map_err(io(&paths.pairs))?;
    fs::write(&paths.config, config.to_toml()).map_err(io(&paths.config))?;
    let manifest = serde_json::to_string_pretty(&Manifest::from_pairs(pairs)).expect("manifest serializes") + "\n";
    fs::write(&paths.manifest, manifest).map_err(io(&paths.manifest))?;
    Ok(paths)
}
