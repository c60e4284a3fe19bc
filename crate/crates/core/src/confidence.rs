//! Confidence extraction and calibration math.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::TokenLogprob;
use crate::correctness::exact_match_relaxed;
use crate::datamodel::EvalCondition;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("no answer-token logprobs to average")]
    EmptyLogprobs,
    #[error("calibration reference list is empty")]
    EmptyCalibration,
    #[error("isotonic fit needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("AUC needs both positive and negative labels")]
    SingleClass,
    #[error("threshold tuning needs records from both context conditions")]
    SingleCondition,
    #[error("score {0} is not a finite value")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Internal,
    Context,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Internal => "internal",
            Source::Context => "context",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMethod {
    Seqprob,
    SelfConsistency,
    IsotonicCalibrated,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub value: f64,
    pub method: ConfidenceMethod,
    pub source: Source,
}

fn finite(x: f64) -> Result<f64, ConfidenceError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ConfidenceError::NonFinite(x))
    }
}

/// Arithmetic mean of per-token probabilities.
pub fn answer_confidence(logprobs: &[f64]) -> Result<f64, ConfidenceError> {
    if logprobs.is_empty() {
        return Err(ConfidenceError::EmptyLogprobs);
    }
    let mut sum = 0.0;
    for &lp in logprobs {
        if lp.is_nan() {
            return Err(ConfidenceError::NonFinite(lp));
        }
        sum += lp.exp();
    }
    Ok((sum / logprobs.len() as f64).clamp(0.0, 1.0))
}

/// Logprobs of the tokens that overlap the first occurrence of `answer` in
/// the concatenated token text. Falls back to every token when the answer
/// cannot be located.
pub fn answer_span_logprobs(tokens: &[TokenLogprob], answer: &str) -> Vec<f64> {
    let all = || tokens.iter().map(|t| t.logprob).collect();
    let answer = answer.trim();
    if answer.is_empty() {
        return all();
    }
    let text: String = tokens.iter().map(|t| t.token.as_str()).collect();
    let Some(start) = text.find(answer) else {
        return all();
    };
    let end = start + answer.len();
    let mut offset = 0;
    let mut out = Vec::new();
    for t in tokens {
        let (s, e) = (offset, offset + t.token.len());
        offset = e;
        if e > start && s < end {
            out.push(t.logprob);
        }
    }
    if out.is_empty() {
        all()
    } else {
        out
    }
}

/// Fraction of samples that contain the reference answer under relaxed
/// exact match.
pub fn self_consistency(samples: &[String], reference: &str) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let reference = [reference.to_string()];
    let hits = samples
        .iter()
        .filter(|s| exact_match_relaxed(s, &reference))
        .count();
    hits as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyConfig {
    pub samples: u32,
    pub temperature: f64,
}

impl Default for SelfConsistencyConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 1.0,
        }
    }
}

/// Midrank percentile of `score` within `calibration`.
pub fn percentile(score: f64, calibration: &[f64]) -> Result<f64, ConfidenceError> {
    if calibration.is_empty() {
        return Err(ConfidenceError::EmptyCalibration);
    }
    finite(score)?;
    let below = calibration.iter().filter(|&&c| c < score).count();
    let equal = calibration.iter().filter(|&&c| c == score).count();
    Ok((below as f64 + 0.5 * equal as f64) / calibration.len() as f64)
}

/// Sorted calibration scores for one (dataset, method, source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReference {
    pub scores: Vec<f64>,
}

impl PercentileReference {
    pub fn new(mut scores: Vec<f64>) -> Result<Self, ConfidenceError> {
        if scores.is_empty() {
            return Err(ConfidenceError::EmptyCalibration);
        }
        for &s in &scores {
            finite(s)?;
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores })
    }

    pub fn percentile(&self, score: f64) -> Result<f64, ConfidenceError> {
        percentile(score, &self.scores)
    }
}

/// Non-decreasing step function from raw score to calibrated probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    /// One entry per distinct fitted score, sorted by score.
    pub breakpoints: Vec<(f64, f64)>,
    pub fitted_on: usize,
}

impl IsotonicMap {
    /// Pool-adjacent-violators fit of binary labels against scores.
    pub fn fit(pairs: &[(f64, bool)]) -> Result<Self, ConfidenceError> {
        if pairs.len() < 2 {
            return Err(ConfidenceError::TooFewPairs(pairs.len()));
        }
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for &(s, y) in pairs {
            sorted.push((finite(s)?, if y { 1.0 } else { 0.0 }));
        }
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Equal scores must share a value, so they are pooled before any
        // violator merging looks at block means.
        struct Block {
            sum: f64,
            weight: f64,
            xs: Vec<f64>,
        }
        let mut groups: Vec<Block> = Vec::new();
        for (x, y) in sorted {
            match groups.last_mut() {
                Some(b) if b.xs[0] == x => {
                    b.sum += y;
                    b.weight += 1.0;
                }
                _ => groups.push(Block {
                    sum: y,
                    weight: 1.0,
                    xs: vec![x],
                }),
            }
        }
        let mut blocks: Vec<Block> = Vec::with_capacity(groups.len());
        for group in groups {
            blocks.push(group);
            while blocks.len() >= 2 {
                let n = blocks.len();
                let (prev, last) = (&blocks[n - 2], &blocks[n - 1]);
                if prev.sum / prev.weight <= last.sum / last.weight {
                    break;
                }
                let last = blocks.pop().expect("two blocks");
                let prev = blocks.last_mut().expect("two blocks");
                prev.sum += last.sum;
                prev.weight += last.weight;
                prev.xs.extend(last.xs);
            }
        }
        let breakpoints = blocks
            .iter()
            .flat_map(|b| {
                let v = b.sum / b.weight;
                b.xs.iter().map(move |&x| (x, v))
            })
            .collect();
        Ok(Self {
            breakpoints,
            fitted_on: pairs.len(),
        })
    }

    /// Value at the largest breakpoint not above `score`; clamps outside the
    /// fitted range.
    pub fn apply(&self, score: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&(x, _)| x <= score);
        let idx = idx.saturating_sub(1);
        self.breakpoints.get(idx).map(|&(_, v)| v).unwrap_or(0.0)
    }
}

pub const ECE_BINS: usize = 10;

/// Expected calibration error over equal-width bins on [0, 1].
pub fn ece(scores: &[f64], labels: &[bool], bins: usize) -> Result<f64, ConfidenceError> {
    if scores.len() != labels.len() {
        return Err(ConfidenceError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() || bins == 0 {
        return Err(ConfidenceError::EmptyInput);
    }
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let s = finite(s)?.clamp(0.0, 1.0);
        let b = ((s * bins as f64).floor() as usize).min(bins - 1);
        conf[b] += s;
        acc[b] += if y { 1.0 } else { 0.0 };
        count[b] += 1;
    }
    let n = scores.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (acc[b] - conf[b]).abs() / n)
        .sum())
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, ConfidenceError> {
    if scores.len() != labels.len() {
        return Err(ConfidenceError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for &s in scores {
        finite(s)?;
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ConfidenceError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Which answer a confidence threshold guards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Keep the internal answer when its confidence exceeds the threshold.
    Internal,
    /// Take the context answer when its confidence exceeds the threshold.
    Context,
}

/// One calibration-set outcome for threshold replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub confidence: f64,
    pub condition: EvalCondition,
    pub internal_correct: bool,
    pub context_correct: bool,
}

/// Correct and total counts per condition (true, false) for the threshold
/// rule replayed over `records`.
fn replay_counts(records: &[TuneRecord], orientation: Orientation, threshold: f64) -> ([usize; 2], [usize; 2]) {
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for r in records {
        let idx = match r.condition {
            EvalCondition::TrueContext => 0,
            EvalCondition::FalseContext => 1,
            EvalCondition::NoContext => continue,
        };
        let over = r.confidence > threshold;
        let pick_internal = match orientation {
            Orientation::Internal => over,
            Orientation::Context => !over,
        };
        let ok = if pick_internal {
            r.internal_correct
        } else {
            r.context_correct
        };
        total[idx] += 1;
        correct[idx] += ok as usize;
    }
    (correct, total)
}

/// Situated faithfulness of the threshold rule replayed over `records`.
pub fn replay_sf(records: &[TuneRecord], orientation: Orientation, threshold: f64) -> f64 {
    let (correct, total) = replay_counts(records, orientation, threshold);
    let rate = |i: usize| {
        if total[i] == 0 {
            0.0
        } else {
            correct[i] as f64 / total[i] as f64
        }
    };
    (rate(0) + rate(1)) / 2.0
}

pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// Grid search over {0.00, 0.01, ..., 1.00} maximizing replayed SF; ties go
/// to the smaller threshold.
pub fn tune_threshold(
    records: &[TuneRecord],
    orientation: Orientation,
) -> Result<f64, ConfidenceError> {
    if records.is_empty() {
        return Err(ConfidenceError::EmptyInput);
    }
    let has = |c| records.iter().any(|r| r.condition == c);
    if !has(EvalCondition::TrueContext) || !has(EvalCondition::FalseContext) {
        return Err(ConfidenceError::SingleCondition);
    }
    for r in records {
        finite(r.confidence)?;
    }
    // SF scaled by n_true * n_false stays an integer, so equal SF values
    // compare equal and ties reliably keep the smaller threshold.
    let mut best: Option<(usize, f64)> = None;
    for t in threshold_grid() {
        let (c, n) = replay_counts(records, orientation, t);
        let score = c[0] * n[1] + c[1] * n[0];
        if best.map_or(true, |(b, _)| score > b) {
            best = Some((score, t));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

/// Identifies a calibration artifact on disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactKey {
    pub dataset: String,
    pub method: String,
    pub source: Source,
}

impl ArtifactKey {
    pub fn new(dataset: &str, method: &str, source: Source) -> Self {
        Self {
            dataset: dataset.to_lowercase(),
            method: method.to_string(),
            source,
        }
    }

    pub fn file_name(&self) -> String {
        let safe = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
                .collect()
        };
        format!(
            "{}__{}__{}.json",
            safe(&self.dataset),
            safe(&self.method),
            self.source
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Artifact {
    Threshold { threshold: f64, orientation: Orientation },
    Isotonic(IsotonicMap),
    Percentile(PercentileReference),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFile {
    pub key: ArtifactKey,
    pub artifact: Artifact,
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing calibration artifact {file} in {dir}")]
    Missing { dir: PathBuf, file: String },
}

pub fn save_artifact(dir: &Path, key: &ArtifactKey, artifact: &Artifact) -> Result<PathBuf, ArtifactError> {
    fs::create_dir_all(dir).map_err(|source| ArtifactError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(key.file_name());
    let file = ArtifactFile {
        key: key.clone(),
        artifact: artifact.clone(),
    };
    let body = serde_json::to_string_pretty(&file).expect("artifact serializes") + "\n";
    fs::write(&path, body).map_err(|source| ArtifactError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn load_artifact(dir: &Path, key: &ArtifactKey) -> Result<Artifact, ArtifactError> {
    let path = dir.join(key.file_name());
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ArtifactError::Missing {
                dir: dir.to_path_buf(),
                file: key.file_name(),
            })
        }
        Err(source) => return Err(ArtifactError::Io { path, source }),
    };
    let file: ArtifactFile =
        serde_json::from_str(&text).map_err(|source| ArtifactError::Json { path, source })?;
    Ok(file.artifact)
}
