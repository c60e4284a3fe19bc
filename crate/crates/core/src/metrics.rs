//! Situated-faithfulness metrics and report rendering.
//!
//! Acc_t is accuracy over pairs with the correct context, Acc_f over pairs
//! with the incorrect one, and SF their mean. A model cannot beat its own
//! closed-book accuracy on Acc_f except by luck, so that accuracy is reported
//! as the Acc_f bound and (bound + 1) / 2 as the SF bound.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correctness::CorrectnessLabel;
use crate::datamodel::EvalCondition;
use crate::methods::Decision;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{method}/{dataset}: no {condition} decisions")]
    EmptyGroup {
        method: String,
        dataset: String,
        condition: EvalCondition,
    },
    #[error("{dataset}: no closed-book labels")]
    EmptyClosedBook { dataset: String },
}

pub const FLAG_ACC_F_ABOVE_BOUND: &str = "acc_f_above_bound";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub dataset: String,
    pub acc_t: f64,
    pub acc_f: f64,
    pub sf: f64,
    pub closed_book_acc: f64,
    pub n_true: usize,
    pub n_false: usize,
    pub acc_f_bound: f64,
    pub sf_bound: f64,
    pub flags: Vec<String>,
}

impl MethodReport {
    /// Builds a report from rates. Flags Acc_f above the closed-book bound by
    /// more than a 95% binomial margin on `n_false`.
    pub fn from_rates(
        method: &str,
        dataset: &str,
        acc_t: f64,
        acc_f: f64,
        closed_book_acc: f64,
        n_true: usize,
        n_false: usize,
    ) -> Self {
        let cb = closed_book_acc;
        let margin = if n_false > 0 {
            1.96 * (cb * (1.0 - cb) / n_false as f64).sqrt()
        } else {
            0.0
        };
        let mut flags = Vec::new();
        if acc_f > cb + margin + 1e-12 {
            log::warn!(
                "{method}/{dataset}: Acc_f {acc_f:.3} exceeds closed-book bound {cb:.3} (margin {margin:.3})"
            );
            flags.push(FLAG_ACC_F_ABOVE_BOUND.to_string());
        }
        Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            acc_t,
            acc_f,
            sf: (acc_t + acc_f) / 2.0,
            closed_book_acc: cb,
            n_true,
            n_false,
            acc_f_bound: cb,
            sf_bound: (cb + 1.0) / 2.0,
            flags,
        }
    }
}

fn rate(labels: &[bool]) -> f64 {
    labels.iter().filter(|&&b| b).count() as f64 / labels.len() as f64
}

pub fn compute_report(
    method: &str,
    dataset: &str,
    true_labels: &[bool],
    false_labels: &[bool],
    closed_book_labels: &[bool],
) -> Result<MethodReport, MetricsError> {
    let empty = |condition| MetricsError::EmptyGroup {
        method: method.to_string(),
        dataset: dataset.to_string(),
        condition,
    };
    if true_labels.is_empty() {
        return Err(empty(EvalCondition::TrueContext));
    }
    if false_labels.is_empty() {
        return Err(empty(EvalCondition::FalseContext));
    }
    if closed_book_labels.is_empty() {
        return Err(MetricsError::EmptyClosedBook {
            dataset: dataset.to_string(),
        });
    }
    Ok(MethodReport::from_rates(
        method,
        dataset,
        rate(true_labels),
        rate(false_labels),
        rate(closed_book_labels),
        true_labels.len(),
        false_labels.len(),
    ))
}

/// One line of the per-decision audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub instance_id: String,
    pub dataset: String,
    pub condition: EvalCondition,
    pub method: String,
    pub correct: CorrectnessLabel,
    #[serde(flatten)]
    pub decision: Decision,
}

/// Groups decision records by (method, dataset) in first-appearance order
/// and computes one report per group. `closed_book` maps a dataset name to
/// its closed-book labels.
pub fn reports_from_records(
    records: &[DecisionRecord],
    closed_book: &BTreeMap<String, Vec<bool>>,
) -> Result<Vec<MethodReport>, MetricsError> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for r in records {
        let key = (r.method.clone(), r.dataset.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), Vec::new())
        });
        match r.condition {
            EvalCondition::TrueContext => entry.0.push(r.correct.correct),
            EvalCondition::FalseContext => entry.1.push(r.correct.correct),
            EvalCondition::NoContext => {}
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (t, f) = &groups[&key];
            let cb = closed_book.get(&key.1).map(Vec::as_slice).unwrap_or(&[]);
            compute_report(&key.0, &key.1, t, f, cb)
        })
        .collect()
}

/// Percentage rounded half-up to one decimal.
pub fn pct1(rate: f64) -> f64 {
    ((rate * 1000.0) + 1e-6).round() / 10.0
}

fn fmt_pct(rate: f64) -> String {
    format!("{:.1}", pct1(rate))
}

pub const CSV_HEADER: &str = "method,dataset,tr,fa,ov,n_true,n_false,closed_book,flags";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn ordered_unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Unweighted mean SF per method over its datasets, in first-appearance order.
pub fn total_ov(reports: &[MethodReport]) -> Vec<(String, f64, usize)> {
    ordered_unique(reports.iter().map(|r| r.method.as_str()))
        .into_iter()
        .map(|m| {
            let sfs: Vec<f64> = reports.iter().filter(|r| r.method == m).map(|r| r.sf).collect();
            (m.to_string(), sfs.iter().sum::<f64>() / sfs.len() as f64, sfs.len())
        })
        .collect()
}

/// CSV with one row per report, then a `Total` row per method that spans
/// more than one dataset.
pub fn format_csv(reports: &[MethodReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&r.method),
            csv_field(&r.dataset),
            fmt_pct(r.acc_t),
            fmt_pct(r.acc_f),
            fmt_pct(r.sf),
            r.n_true,
            r.n_false,
            fmt_pct(r.closed_book_acc),
            csv_field(&r.flags.join(";")),
        );
    }
    for (method, ov, n) in total_ov(reports) {
        if n > 1 {
            let _ = writeln!(out, "{},Total,,,{},,,,", csv_field(&method), fmt_pct(ov));
        }
    }
    out
}

/// Fixed-width table: one row per method, TR/FA/OV per dataset, Total OV.
pub fn format_text(reports: &[MethodReport]) -> String {
    let methods = ordered_unique(reports.iter().map(|r| r.method.as_str()));
    let datasets = ordered_unique(reports.iter().map(|r| r.dataset.as_str()));
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "");
    for d in &datasets {
        let _ = write!(out, " | {:^17}", d);
    }
    let _ = writeln!(out, " | {:>5}", "Total");
    let _ = write!(out, "{:<width$}", "Method");
    for _ in &datasets {
        let _ = write!(out, " | {:>5} {:>5} {:>5}", "TR", "FA", "OV");
    }
    let _ = writeln!(out, " | {:>5}", "OV");
    let totals = total_ov(reports);
    for m in &methods {
        let _ = write!(out, "{:<width$}", m);
        for d in &datasets {
            match reports.iter().find(|r| r.method == *m && r.dataset == *d) {
                Some(r) => {
                    let _ = write!(
                        out,
                        " | {:>5} {:>5} {:>5}",
                        fmt_pct(r.acc_t),
                        fmt_pct(r.acc_f),
                        fmt_pct(r.sf)
                    );
                }
                None => {
                    let _ = write!(out, " | {:>5} {:>5} {:>5}", "-", "-", "-");
                }
            }
        }
        let total = totals.iter().find(|t| t.0 == *m).map(|t| t.1).unwrap_or(0.0);
        let _ = writeln!(out, " | {:>5}", fmt_pct(total));
    }
    out
}

/// Text and CSV renderings of the same reports.
pub fn format_table(reports: &[MethodReport]) -> (String, String) {
    (format_text(reports), format_csv(reports))
}
