//! Command-line front end.
//!
//! Settings come from three layers, later ones winning: built-in defaults,
//! the TOML file named by `--config`, then individual flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{dispatch as run_parallel, Backend, BackendConfig, BackendError, CachedBackend, HttpBackend, MockBackend};
use crate::confidence::{save_artifact, Artifact, ArtifactError, ArtifactKey, Source};
use crate::correctness::{self, CorrectnessLabel, JudgeError, JudgePolicy};
use crate::crdpo::{self, CrdpoConfig, CrdpoError, TrainConfig};
use crate::datamodel::{
    build_calibration_set, load_dataset_with, make_eval_pairs, save_dataset, synthesize_wrong_context, DataError,
    EvalCondition, LoadOptions, QAInstance, Split, SynthesisConfig,
};
use crate::methods::{
    fit_isotonic, fit_percentile, fit_threshold, BaseMethod, CalibrationOutcome, CalibrationStore, Engine,
    GenerationSettings, MethodError, MethodId,
};
use crate::metrics::{format_csv, format_text, reports_from_records, DecisionRecord, MetricsError};
use crate::prompts::{PromptError, TemplateSet};

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const CLOSED_BOOK_FILE: &str = "closed_book.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Crdpo(#[from] CrdpoError),
    #[error("method: {0}")]
    Method(#[from] MethodError),
    #[error("instance {instance} ({stage}): {source}")]
    Instance {
        instance: String,
        stage: String,
        #[source]
        source: Box<CliError>,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        CliError::Method(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.to_path_buf();
    move |source| CliError::Io { path, source }
}

fn at(instance: &QAInstance, stage: impl Into<String>) -> impl FnOnce(CliError) -> CliError {
    let instance = instance.id.clone();
    let stage = stage.into();
    move |e| CliError::Instance {
        instance,
        stage,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// Everything a run needs. Loaded from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<PathBuf>,
    pub methods: Vec<String>,
    pub backend: BackendKind,
    /// Scripted replies for the mock backend.
    pub mock_script: Option<PathBuf>,
    pub http: BackendConfig,
    pub judge: JudgePolicy,
    pub calibration_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub cache: bool,
    pub split: Option<Split>,
    /// Fixed threshold for untuned InternalConf/ContextConf.
    pub threshold: Option<f64>,
    pub calibration_size: usize,
    pub generation: GenerationSettings,
    pub synthesis: SynthesisConfig,
    pub crdpo: CrdpoConfig,
    pub train: TrainConfig,
    /// Input for `report`; defaults to the output directory.
    pub decisions: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            methods: Vec::new(),
            backend: BackendKind::Mock,
            mock_script: None,
            http: BackendConfig::default(),
            judge: JudgePolicy::standard(),
            calibration_dir: None,
            out: PathBuf::from("out"),
            seed: 0,
            cache: true,
            split: None,
            threshold: None,
            calibration_size: 200,
            generation: GenerationSettings::default(),
            synthesis: SynthesisConfig::default(),
            crdpo: CrdpoConfig::default(),
            train: TrainConfig::default(),
            decisions: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn method_ids(&self) -> Result<Vec<MethodId>, CliError> {
        self.methods
            .iter()
            .map(|m| m.parse::<MethodId>().map_err(CliError::from))
            .collect()
    }

    pub fn calibration_dir(&self) -> PathBuf {
        self.calibration_dir
            .clone()
            .unwrap_or_else(|| self.out.join("calibration"))
    }

    /// Checks the parts every subcommand relies on.
    pub fn validate(&self, needs_methods: bool) -> Result<(), CliError> {
        if self.datasets.is_empty() {
            return Err(CliError::Config("no dataset given (--dataset)".into()));
        }
        for p in &self.datasets {
            if !p.is_file() {
                return Err(CliError::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        if needs_methods && self.methods.is_empty() {
            return Err(CliError::Config("no method given (--method)".into()));
        }
        self.method_ids()?;
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(CliError::Config(format!("threshold {t} outside [0, 1]")));
            }
        }
        if self.backend == BackendKind::Mock {
            match &self.mock_script {
                Some(p) if !p.is_file() => {
                    return Err(CliError::Config(format!("mock script {} does not exist", p.display())))
                }
                None => return Err(CliError::Config("the mock backend needs --mock-script".into())),
                _ => {}
            }
        }
        self.http.validate()?;
        Ok(())
    }

    fn engine_settings(&self) -> GenerationSettings {
        let mut s = self.generation.clone();
        if let Some(t) = self.threshold {
            s.default_threshold = t;
        }
        s.seed = Some(self.seed);
        s
    }

    fn load_instances(&self, options: LoadOptions) -> Result<Vec<QAInstance>, CliError> {
        let mut all = Vec::new();
        for p in &self.datasets {
            all.extend(load_dataset_with(p, options)?);
        }
        if let Some(split) = self.split {
            all.retain(|i| i.split == split);
        }
        Ok(all)
    }
}

#[derive(Debug, Parser)]
#[command(name = "situated", version, about = "Situated faithfulness evaluation under knowledge conflict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run methods over correct/incorrect-context pairs and write decisions plus a report.
    Evaluate(CommonArgs),
    /// Fit decision thresholds on a balanced dev calibration set.
    Tune(CommonArgs),
    /// Fit isotonic maps and percentile references on a dev calibration set.
    Calibrate(CommonArgs),
    /// Generate CR-DPO preference pairs and a training bundle.
    GenCrdpo(CommonArgs),
    /// Write incorrect contexts for instances that lack one.
    SynthContexts(CommonArgs),
    /// Re-render the report from an existing decision log.
    Report(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset JSONL file (repeatable).
    #[arg(long = "dataset")]
    datasets: Vec<PathBuf>,
    /// Method id such as `dia` or `internal_conf+tuned` (repeatable).
    #[arg(long = "method")]
    methods: Vec<String>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// JSON reply script for the mock backend.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    calibration_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_concurrency: Option<usize>,
    /// Disable the on-disk response cache.
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    split: Option<Split>,
    /// Decision log read by `report`.
    #[arg(long)]
    decisions: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !self.datasets.is_empty() {
            c.datasets = self.datasets.clone();
        }
        if !self.methods.is_empty() {
            c.methods = self.methods.clone();
        }
        if let Some(b) = self.backend {
            c.backend = b;
        }
        if let Some(p) = &self.mock_script {
            c.mock_script = Some(p.clone());
        }
        if let Some(e) = &self.endpoint {
            c.http.endpoint = e.clone();
        }
        if let Some(m) = &self.model {
            c.http.model = m.clone();
        }
        if self.threshold.is_some() {
            c.threshold = self.threshold;
        }
        if let Some(d) = &self.calibration_dir {
            c.calibration_dir = Some(d.clone());
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.max_concurrency {
            c.http.max_concurrent = n;
        }
        if self.no_cache {
            c.cache = false;
        }
        if self.split.is_some() {
            c.split = self.split;
        }
        if let Some(d) = &self.decisions {
            c.decisions = Some(d.clone());
        }
        Ok(c)
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Evaluate(a) => {
            let c = a.resolve()?;
            c.validate(true)?;
            with_backend(&c, |b| evaluate(&c, b).map(|_| ()))
        }
        Command::Tune(a) => {
            let c = a.resolve()?;
            c.validate(true)?;
            with_backend(&c, |b| tune(&c, b).map(|_| ()))
        }
        Command::Calibrate(a) => {
            let c = a.resolve()?;
            c.validate(true)?;
            with_backend(&c, |b| calibrate(&c, b).map(|_| ()))
        }
        Command::GenCrdpo(a) => {
            let c = a.resolve()?;
            c.validate(false)?;
            with_backend(&c, |b| gen_crdpo(&c, b).map(|_| ()))
        }
        Command::SynthContexts(a) => {
            let c = a.resolve()?;
            c.validate(false)?;
            with_backend(&c, |b| synth_contexts(&c, b).map(|_| ()))
        }
        Command::Report(a) => {
            let c = a.resolve()?;
            let text = report(&c)?;
            print!("{text}");
            Ok(())
        }
    }
}

/// Builds the configured backend, wrapped in the response cache unless
/// caching is off, and hands it to `f`.
pub fn with_backend<R>(config: &RunConfig, f: impl FnOnce(&dyn Backend) -> Result<R, CliError>) -> Result<R, CliError> {
    let inner: Box<dyn Backend> = match config.backend {
        BackendKind::Mock => {
            let path = config
                .mock_script
                .as_ref()
                .ok_or_else(|| CliError::Config("the mock backend needs --mock-script".into()))?;
            let json = fs::read_to_string(path).map_err(io_err(path))?;
            Box::new(MockBackend::from_script_json("mock", &json)?)
        }
        BackendKind::Http => Box::new(HttpBackend::from_env(config.http.clone())?),
    };
    if config.cache {
        let dir = config.http.cache_dir.clone().unwrap_or_else(|| config.out.join("cache"));
        let cached = CachedBackend::on_disk(inner, dir)?;
        f(&cached)
    } else {
        f(inner.as_ref())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn engine<'a>(config: &RunConfig, backend: &'a dyn Backend, templates: &'a TemplateSet) -> Engine<'a> {
    let mut e = Engine::new(backend, templates);
    e.settings = config.engine_settings();
    e
}

/// Closed-book answer and its label for one instance; the source of the
/// Acc_f and SF bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedBookRecord {
    pub instance_id: String,
    pub dataset: String,
    pub answer: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutputs {
    pub decisions: PathBuf,
    pub closed_book: PathBuf,
    pub csv: PathBuf,
    pub text: PathBuf,
    pub records: Vec<DecisionRecord>,
}

/// The `evaluate` subcommand against an already built backend.
pub fn evaluate(config: &RunConfig, backend: &dyn Backend) -> Result<EvalOutputs, CliError> {
    let methods = config.method_ids()?;
    if methods.is_empty() {
        return Err(CliError::Config("no method given (--method)".into()));
    }
    let instances = config.load_instances(LoadOptions::default())?;
    if instances.is_empty() {
        return Err(CliError::Config("no instances after split filtering".into()));
    }
    let store = match &config.calibration_dir {
        Some(dir) => CalibrationStore::load_dir(dir)?,
        None => CalibrationStore::load_dir(&config.calibration_dir())?,
    };
    let templates = TemplateSet::builtin();
    let engine = engine(config, backend, &templates);
    let workers = config.http.max_concurrent;

    let closed: Vec<Result<ClosedBookRecord, CliError>> = run_parallel(instances.iter().collect(), workers, |i| {
        let rec = engine.run_closed_book(i).map_err(CliError::from).map_err(at(i, "closed_book"))?;
        let label = correctness::judge(i, &rec.answer, &config.judge, Some(backend), &templates)
            .map_err(CliError::from)
            .map_err(at(i, "judge closed_book"))?;
        Ok(ClosedBookRecord {
            instance_id: i.id.clone(),
            dataset: i.dataset.clone(),
            answer: rec.answer,
            correct: label.correct,
        })
    });
    let closed = closed.into_iter().collect::<Result<Vec<_>, _>>()?;

    let pairs = make_eval_pairs(&instances);
    let jobs: Vec<(MethodId, &(QAInstance, EvalCondition))> =
        methods.iter().flat_map(|m| pairs.iter().map(move |p| (*m, p))).collect();
    let results = run_parallel(jobs, workers, |(method, (inst, cond))| {
        let stage = format!("{method} {cond}");
        let decision = engine
            .run_method(method, inst, *cond, &store)
            .map_err(CliError::from)
            .map_err(at(inst, stage.clone()))?;
        let correct: CorrectnessLabel =
            correctness::judge(inst, &decision.final_answer, &config.judge, Some(backend), &templates)
                .map_err(CliError::from)
                .map_err(at(inst, format!("judge {stage}")))?;
        Ok::<_, CliError>(DecisionRecord {
            instance_id: inst.id.clone(),
            dataset: inst.dataset.clone(),
            condition: *cond,
            method: method.to_string(),
            correct,
            decision,
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_outputs(config, &records, &closed)
}

fn closed_book_labels(closed: &[ClosedBookRecord]) -> BTreeMap<String, Vec<bool>> {
    let mut m: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for c in closed {
        m.entry(c.dataset.clone()).or_default().push(c.correct);
    }
    m
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn write_outputs(
    config: &RunConfig,
    records: &[DecisionRecord],
    closed: &[ClosedBookRecord],
) -> Result<EvalOutputs, CliError> {
    let reports = reports_from_records(records, &closed_book_labels(closed))?;
    let out = EvalOutputs {
        decisions: config.out.join(DECISIONS_FILE),
        closed_book: config.out.join(CLOSED_BOOK_FILE),
        csv: config.out.join(REPORT_CSV),
        text: config.out.join(REPORT_TXT),
        records: records.to_vec(),
    };
    write_file(&out.decisions, &jsonl(records))?;
    write_file(&out.closed_book, &jsonl(closed))?;
    write_file(&out.csv, &format_csv(&reports))?;
    write_file(&out.text, &format_text(&reports))?;
    log::info!("wrote {} decisions to {}", records.len(), out.decisions.display());
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Recomputes report.csv and report.txt from a decision log and the
/// closed-book log next to it. Returns the text table.
pub fn report(config: &RunConfig) -> Result<String, CliError> {
    let decisions = config.decisions.clone().unwrap_or_else(|| config.out.join(DECISIONS_FILE));
    let records: Vec<DecisionRecord> = read_jsonl(&decisions)?;
    let closed_path = decisions
        .parent()
        .map(|p| p.join(CLOSED_BOOK_FILE))
        .unwrap_or_else(|| PathBuf::from(CLOSED_BOOK_FILE));
    let closed: Vec<ClosedBookRecord> = read_jsonl(&closed_path)?;
    let reports = reports_from_records(&records, &closed_book_labels(&closed))?;
    write_file(&config.out.join(REPORT_CSV), &format_csv(&reports))?;
    let text = format_text(&reports);
    write_file(&config.out.join(REPORT_TXT), &text)?;
    Ok(text)
}

fn by_dataset(instances: Vec<QAInstance>) -> BTreeMap<String, Vec<QAInstance>> {
    let mut m: BTreeMap<String, Vec<QAInstance>> = BTreeMap::new();
    for i in instances {
        m.entry(i.dataset.to_lowercase()).or_default().push(i);
    }
    m
}

/// Generates and judges a balanced dev calibration set for one dataset.
fn calibration_outcomes(
    config: &RunConfig,
    engine: &Engine<'_>,
    method: MethodId,
    dev: &[QAInstance],
) -> Result<Vec<CalibrationOutcome>, CliError> {
    let n_dev = dev.iter().filter(|i| i.split == Split::Dev).count();
    let size = config.calibration_size.min(2 * n_dev);
    if size < config.calibration_size {
        log::warn!("calibration set shrunk to {size}: only {n_dev} dev instances");
    }
    let set = build_calibration_set(dev, size, config.seed)?;
    let results = run_parallel(set.entries.iter().collect(), config.http.max_concurrent, |(inst, cond)| {
        engine
            .calibration_outcome(method, inst, *cond, &config.judge)
            .map_err(CliError::from)
            .map_err(at(inst, format!("calibrate {method} {cond}")))
    });
    results.into_iter().collect()
}

/// The `tune` subcommand: one threshold artifact per (dataset, method).
pub fn tune(config: &RunConfig, backend: &dyn Backend) -> Result<Vec<PathBuf>, CliError> {
    let templates = TemplateSet::builtin();
    let engine = engine(config, backend, &templates);
    let dir = config.calibration_dir();
    let store = CalibrationStore::load_dir(&dir)?;
    let mut written = Vec::new();
    for (dataset, instances) in by_dataset(config.load_instances(LoadOptions::default())?) {
        for method in config.method_ids()? {
            let method = MethodId {
                threshold_tuned: true,
                ..method
            };
            let source = method.threshold_source().ok_or_else(|| MethodError::InvalidModifier {
                method: method.to_string(),
                message: "only internal_conf and context_conf have thresholds".into(),
            })?;
            let isotonic = if method.isotonic_calibrated {
                Some(store.isotonic(&ArtifactKey::new(&dataset, &method.isotonic_artifact_method(), source))?)
            } else {
                None
            };
            let outcomes = calibration_outcomes(config, &engine, method, &instances)?;
            let (threshold, orientation) = fit_threshold(method, &outcomes, isotonic)?;
            let key = ArtifactKey::new(&dataset, &method.threshold_artifact_method(), source);
            log::info!("{dataset} {method}: threshold {threshold}");
            written.push(save_artifact(&dir, &key, &Artifact::Threshold { threshold, orientation })?);
        }
    }
    Ok(written)
}

/// The `calibrate` subcommand: isotonic maps for threshold methods and
/// percentile references for CTPC.
pub fn calibrate(config: &RunConfig, backend: &dyn Backend) -> Result<Vec<PathBuf>, CliError> {
    let templates = TemplateSet::builtin();
    let engine = engine(config, backend, &templates);
    let dir = config.calibration_dir();
    let mut written = Vec::new();
    for (dataset, instances) in by_dataset(config.load_instances(LoadOptions::default())?) {
        for method in config.method_ids()? {
            let outcomes = calibration_outcomes(config, &engine, method, &instances)?;
            if let Some(source) = method.threshold_source() {
                let map = fit_isotonic(&outcomes, source)?;
                let key = ArtifactKey::new(&dataset, &method.isotonic_artifact_method(), source);
                written.push(save_artifact(&dir, &key, &Artifact::Isotonic(map))?);
            } else if matches!(method.base, BaseMethod::Tpc | BaseMethod::Ctpc) {
                let ctpc = MethodId {
                    base: BaseMethod::Ctpc,
                    ..method
                }
                .to_string();
                for source in [Source::Internal, Source::Context] {
                    let reference = fit_percentile(&outcomes, source)?;
                    let key = ArtifactKey::new(&dataset, &ctpc, source);
                    written.push(save_artifact(&dir, &key, &Artifact::Percentile(reference))?);
                }
            } else {
                return Err(MethodError::InvalidModifier {
                    method: method.to_string(),
                    message: "nothing to calibrate for this method".into(),
                }
                .into());
            }
        }
    }
    Ok(written)
}

/// The `gen-crdpo` subcommand. Pairs and the training bundle go to `out`.
pub fn gen_crdpo(config: &RunConfig, backend: &dyn Backend) -> Result<crdpo::BundlePaths, CliError> {
    let templates = TemplateSet::builtin();
    let engine = engine(config, backend, &templates);
    let instances = config.load_instances(LoadOptions::default())?;
    let mut crdpo_config = config.crdpo.clone();
    crdpo_config.seed = config.seed;
    let per_pair = run_parallel(make_eval_pairs(&instances), config.http.max_concurrent, |(inst, cond)| {
        crdpo::pairs_for(&engine, &inst, cond, &config.judge, &crdpo_config)
            .map_err(CliError::from)
            .map_err(at(&inst, format!("gen-crdpo {cond}")))
    });
    let mut pairs = Vec::new();
    for p in per_pair {
        pairs.extend(p?);
    }
    log::info!("{} preference pairs", pairs.len());
    Ok(crdpo::emit_training_bundle(&pairs, &config.out, &config.train)?)
}

/// The `synth-contexts` subcommand. Each input file gets a sibling
/// `<stem>.synth.jsonl` in `out`; instances whose synthesis is exhausted are
/// dropped with a warning.
pub fn synth_contexts(config: &RunConfig, backend: &dyn Backend) -> Result<Vec<PathBuf>, CliError> {
    let templates = TemplateSet::builtin();
    let options = LoadOptions {
        require_wrong_context: false,
    };
    let mut written = Vec::new();
    for path in &config.datasets {
        let mut instances = load_dataset_with(path, options)?;
        if let Some(split) = config.split {
            instances.retain(|i| i.split == split);
        }
        let mut synth = config.synthesis.clone();
        synth.seed = config.seed;
        let results = run_parallel(instances, config.http.max_concurrent, |mut inst| {
            if !inst.wrong_context.trim().is_empty() {
                return Ok(Some(inst));
            }
            match synthesize_wrong_context(&inst, backend, &templates, &synth) {
                Ok(s) => {
                    inst.wrong_context = s.context;
                    Ok(Some(inst))
                }
                Err(DataError::SynthesisExhausted { id, attempts }) => {
                    log::warn!("instance {id}: no acceptable context after {attempts} attempts; dropped");
                    Ok(None)
                }
                Err(e) => Err(at(&inst, "synth-contexts")(e.into())),
            }
        });
        let kept: Vec<QAInstance> = results
            .into_iter()
            .collect::<Result<Vec<_>, CliError>>()?
            .into_iter()
            .flatten()
            .collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        let target = config.out.join(format!("{stem}.synth.jsonl"));
        fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
        save_dataset(&target, &kept)?;
        written.push(target);
    }
    Ok(written)
}
