//! Acceptance criteria 1-10. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; the process exits nonzero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use situated::cli;
use situated::confidence::{
    auc_roc, ece, percentile, tune_threshold, IsotonicMap, Orientation, PercentileReference, Source, TuneRecord,
};
use situated::correctness::{token_recall_tail, DEFAULT_RECALL_THRESHOLD, DEFAULT_WINDOW_MULT};
use situated::crdpo::{parse_pairs_jsonl, validate_chosen, Pattern, TrainConfig};
use situated::datamodel::EvalCondition;
use situated::methods::{rule_select, AnswerRecord, DecisionSource, Rule, RuleSpec};
use situated::metrics::{compute_report, DecisionRecord};
use situated::prompts::{Bindings, TemplateName, TemplateSet};

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// ---------------------------------------------------------------------------
// 1. Table 1 arithmetic

/// (model, method, dataset, TR, FA, OV) for every non-closed-book row of
/// Table 1. ContextConf/PopQA FA for gpt-4o-mini is 14.3 as in the
/// full-results table; the main table prints 14.6, which contradicts its own
/// OV of 54.2.
const TABLE1: &[(&str, &str, &str, f64, f64, f64)] = &[
    ("gpt-4o-mini", "DIA", "redditqa", 96.0, 12.5, 54.3),
    ("gpt-4o-mini", "DIA", "freshqa", 96.3, 2.3, 49.3),
    ("gpt-4o-mini", "DIA", "clasheval", 85.3, 12.0, 48.7),
    ("gpt-4o-mini", "DIA", "triviaqa", 96.0, 12.3, 54.2),
    ("gpt-4o-mini", "DIA", "popqa", 97.7, 11.0, 54.4),
    ("gpt-4o-mini", "DIA", "naturalqa", 88.7, 10.3, 49.5),
    ("gpt-4o-mini", "TACS (LR)", "redditqa", 93.8, 16.5, 55.2),
    ("gpt-4o-mini", "TACS (LR)", "freshqa", 86.3, 4.6, 45.5),
    ("gpt-4o-mini", "TACS (LR)", "clasheval", 76.3, 14.3, 45.3),
    ("gpt-4o-mini", "TACS (LR)", "triviaqa", 92.3, 16.0, 54.2),
    ("gpt-4o-mini", "TACS (LR)", "popqa", 76.3, 14.3, 45.3),
    ("gpt-4o-mini", "TACS (LR)", "naturalqa", 86.0, 15.7, 50.9),
    ("gpt-4o-mini", "ContextEval", "redditqa", 90.3, 53.4, 71.9),
    ("gpt-4o-mini", "ContextEval", "freshqa", 77.3, 35.7, 56.5),
    ("gpt-4o-mini", "ContextEval", "clasheval", 86.7, 11.7, 49.2),
    ("gpt-4o-mini", "ContextEval", "triviaqa", 92.3, 47.4, 69.9),
    ("gpt-4o-mini", "ContextEval", "popqa", 91.0, 53.0, 72.0),
    ("gpt-4o-mini", "ContextEval", "naturalqa", 86.6, 36.3, 61.5),
    ("gpt-4o-mini", "InternalEval", "redditqa", 88.6, 77.2, 82.9),
    ("gpt-4o-mini", "InternalEval", "freshqa", 83.3, 30.0, 56.7),
    ("gpt-4o-mini", "InternalEval", "clasheval", 67.0, 17.0, 42.0),
    ("gpt-4o-mini", "InternalEval", "triviaqa", 88.7, 71.7, 80.2),
    ("gpt-4o-mini", "InternalEval", "popqa", 78.0, 48.3, 63.2),
    ("gpt-4o-mini", "InternalEval", "naturalqa", 72.3, 57.3, 64.8),
    ("gpt-4o-mini", "TPC", "redditqa", 92.0, 25.6, 58.8),
    ("gpt-4o-mini", "TPC", "freshqa", 88.7, 22.7, 55.7),
    ("gpt-4o-mini", "TPC", "clasheval", 82.7, 20.3, 51.5),
    ("gpt-4o-mini", "TPC", "triviaqa", 94.7, 39.7, 67.2),
    ("gpt-4o-mini", "TPC", "popqa", 95.0, 17.7, 56.4),
    ("gpt-4o-mini", "TPC", "naturalqa", 87.0, 34.3, 60.7),
    ("gpt-4o-mini", "ContextConf", "redditqa", 93.8, 13.1, 53.5),
    ("gpt-4o-mini", "ContextConf", "freshqa", 82.3, 16.3, 49.3),
    ("gpt-4o-mini", "ContextConf", "clasheval", 80.0, 16.7, 48.4),
    ("gpt-4o-mini", "ContextConf", "triviaqa", 93.0, 19.7, 56.4),
    ("gpt-4o-mini", "ContextConf", "popqa", 94.0, 14.3, 54.2),
    ("gpt-4o-mini", "ContextConf", "naturalqa", 85.0, 30.6, 57.8),
    ("gpt-4o-mini", "InternalConf", "redditqa", 82.3, 79.5, 80.9),
    ("gpt-4o-mini", "InternalConf", "freshqa", 83.6, 38.3, 61.0),
    ("gpt-4o-mini", "InternalConf", "clasheval", 64.6, 20.6, 42.6),
    ("gpt-4o-mini", "InternalConf", "triviaqa", 89.6, 77.0, 83.3),
    ("gpt-4o-mini", "InternalConf", "popqa", 84.0, 50.0, 67.0),
    ("gpt-4o-mini", "InternalConf", "naturalqa", 84.0, 49.3, 66.7),
    ("gpt-4o-mini", "ImplicitSCR", "redditqa", 91.5, 79.0, 85.3),
    ("gpt-4o-mini", "ImplicitSCR", "freshqa", 93.7, 26.3, 60.0),
    ("gpt-4o-mini", "ImplicitSCR", "clasheval", 89.3, 25.3, 57.3),
    ("gpt-4o-mini", "ImplicitSCR", "triviaqa", 96.3, 48.0, 72.2),
    ("gpt-4o-mini", "ImplicitSCR", "popqa", 97.0, 48.3, 72.7),
    ("gpt-4o-mini", "ImplicitSCR", "naturalqa", 82.0, 50.0, 66.0),
    ("gpt-4o-mini", "ExplicitSCR", "redditqa", 92.0, 73.9, 83.0),
    ("gpt-4o-mini", "ExplicitSCR", "freshqa", 82.7, 47.0, 64.9),
    ("gpt-4o-mini", "ExplicitSCR", "clasheval", 82.0, 17.0, 49.5),
    ("gpt-4o-mini", "ExplicitSCR", "triviaqa", 92.3, 71.3, 81.8),
    ("gpt-4o-mini", "ExplicitSCR", "popqa", 93.0, 51.0, 72.0),
    ("gpt-4o-mini", "ExplicitSCR", "naturalqa", 80.3, 51.0, 65.7),
    ("gpt-4o", "DIA", "redditqa", 94.9, 12.5, 53.7),
    ("gpt-4o", "DIA", "freshqa", 93.7, 5.7, 49.7),
    ("gpt-4o", "DIA", "clasheval", 84.7, 24.7, 54.7),
    ("gpt-4o", "DIA", "triviaqa", 96.0, 23.3, 59.7),
    ("gpt-4o", "DIA", "popqa", 97.3, 12.3, 54.8),
    ("gpt-4o", "DIA", "naturalqa", 88.7, 12.7, 50.7),
    ("gpt-4o", "TACS (LR)", "redditqa", 96.0, 17.0, 56.5),
    ("gpt-4o", "TACS (LR)", "freshqa", 81.3, 9.3, 45.3),
    ("gpt-4o", "TACS (LR)", "clasheval", 82.7, 25.7, 54.2),
    ("gpt-4o", "TACS (LR)", "triviaqa", 96.0, 26.7, 61.4),
    ("gpt-4o", "TACS (LR)", "popqa", 96.7, 21.3, 59.0),
    ("gpt-4o", "TACS (LR)", "naturalqa", 88.3, 20.7, 54.5),
    ("gpt-4o", "ContextEval", "redditqa", 92.6, 66.5, 79.6),
    ("gpt-4o", "ContextEval", "freshqa", 87.7, 44.0, 65.9),
    ("gpt-4o", "ContextEval", "clasheval", 81.3, 23.0, 52.2),
    ("gpt-4o", "ContextEval", "triviaqa", 94.3, 71.3, 82.8),
    ("gpt-4o", "ContextEval", "popqa", 96.7, 73.3, 85.0),
    ("gpt-4o", "ContextEval", "naturalqa", 86.7, 51.3, 69.0),
    ("gpt-4o", "InternalEval", "redditqa", 87.5, 81.3, 84.4),
    ("gpt-4o", "InternalEval", "freshqa", 81.3, 40.0, 60.7),
    ("gpt-4o", "InternalEval", "clasheval", 76.7, 30.0, 53.4),
    ("gpt-4o", "InternalEval", "triviaqa", 95.0, 85.7, 90.4),
    ("gpt-4o", "InternalEval", "popqa", 88.7, 70.3, 79.5),
    ("gpt-4o", "InternalEval", "naturalqa", 74.3, 60.3, 67.3),
    ("gpt-4o", "TPC", "redditqa", 94.3, 71.6, 83.0),
    ("gpt-4o", "TPC", "freshqa", 87.0, 39.7, 63.4),
    ("gpt-4o", "TPC", "clasheval", 77.0, 39.0, 58.0),
    ("gpt-4o", "TPC", "triviaqa", 94.3, 75.3, 84.8),
    ("gpt-4o", "TPC", "popqa", 96.7, 66.7, 81.7),
    ("gpt-4o", "TPC", "naturalqa", 84.0, 50.3, 67.2),
    ("gpt-4o", "ContextConf", "redditqa", 93.8, 60.2, 77.0),
    ("gpt-4o", "ContextConf", "freshqa", 78.7, 37.0, 57.9),
    ("gpt-4o", "ContextConf", "clasheval", 70.7, 30.0, 50.4),
    ("gpt-4o", "ContextConf", "triviaqa", 94.6, 43.0, 68.8),
    ("gpt-4o", "ContextConf", "popqa", 95.7, 26.3, 61.0),
    ("gpt-4o", "ContextConf", "naturalqa", 78.7, 36.7, 57.7),
    ("gpt-4o", "InternalConf", "redditqa", 89.8, 78.9, 84.4),
    ("gpt-4o", "InternalConf", "freshqa", 83.7, 50.0, 66.9),
    ("gpt-4o", "InternalConf", "clasheval", 61.6, 40.6, 51.1),
    ("gpt-4o", "InternalConf", "triviaqa", 93.0, 88.0, 90.5),
    ("gpt-4o", "InternalConf", "popqa", 88.7, 78.7, 83.7),
    ("gpt-4o", "InternalConf", "naturalqa", 78.6, 59.6, 69.1),
    ("gpt-4o", "ImplicitSCR", "redditqa", 92.6, 75.6, 84.1),
    ("gpt-4o", "ImplicitSCR", "freshqa", 82.0, 54.0, 68.0),
    ("gpt-4o", "ImplicitSCR", "clasheval", 86.0, 44.3, 65.2),
    ("gpt-4o", "ImplicitSCR", "triviaqa", 94.7, 85.7, 90.2),
    ("gpt-4o", "ImplicitSCR", "popqa", 96.0, 76.7, 86.4),
    ("gpt-4o", "ImplicitSCR", "naturalqa", 83.3, 66.7, 75.0),
    ("gpt-4o", "ExplicitSCR", "redditqa", 93.8, 77.2, 85.5),
    ("gpt-4o", "ExplicitSCR", "freshqa", 85.3, 55.3, 70.3),
    ("gpt-4o", "ExplicitSCR", "clasheval", 83.0, 33.3, 58.2),
    ("gpt-4o", "ExplicitSCR", "triviaqa", 94.7, 84.3, 89.5),
    ("gpt-4o", "ExplicitSCR", "popqa", 92.7, 78.0, 85.4),
    ("gpt-4o", "ExplicitSCR", "naturalqa", 78.7, 60.0, 69.4),
];

fn labels(pct: f64, n: usize) -> Vec<bool> {
    let k = (pct * n as f64 / 100.0).round() as usize;
    (0..n).map(|i| i < k).collect()
}

fn criterion_1() -> Outcome {
    let mut models: BTreeMap<&str, usize> = BTreeMap::new();
    for &(model, method, dataset, tr, fa, ov) in TABLE1 {
        // 1000 labels per condition represent one-decimal percentages exactly.
        let r = compute_report(method, dataset, &labels(tr, 1000), &labels(fa, 1000), &[true, false])
            .map_err(|e| e.to_string())?;
        let got = r.sf * 100.0;
        ensure((got - ov).abs() <= 0.06 + 1e-9, || {
            format!("{model} {method} {dataset}: ({tr}, {fa}) -> {got:.3}, table says {ov}")
        })?;
        *models.entry(model).or_default() += 1;
    }
    let ex = compute_report("DIA", "redditqa", &labels(96.0, 1000), &labels(12.5, 1000), &[true])
        .map_err(|e| e.to_string())?;
    ensure((ex.sf * 100.0 - 54.25).abs() < 1e-9, || format!("(96.0, 12.5) gave {}", ex.sf * 100.0))?;
    ensure(models.len() == 2 && models.values().all(|&n| n == 54), || format!("row counts {models:?}"))
}

// ---------------------------------------------------------------------------
// 2. Rule engine vs brute force

fn record(answer: &str, confidence: Option<f64>, source: Source) -> AnswerRecord {
    AnswerRecord {
        raw_text: answer.to_string(),
        answer: answer.to_string(),
        logprobs: None,
        confidence,
        source,
        prompt_digest: String::new(),
    }
}

/// Midrank percentile by direct counting.
fn oracle_percentile(x: f64, reference: &[f64]) -> f64 {
    let mut twice = 0usize;
    for &r in reference {
        if r < x {
            twice += 2;
        } else if r == x {
            twice += 1;
        }
    }
    twice as f64 / (2 * reference.len()) as f64
}

/// true means the internal answer is chosen.
fn oracle_rule(rule: Rule, ci: f64, cc: f64, t: f64, verdict: bool, ri: &[f64], rc: &[f64]) -> bool {
    match rule {
        Rule::EvalInternal => verdict,
        Rule::EvalContext => !verdict,
        Rule::ThresholdInternal => ci > t,
        Rule::ThresholdContext => !(cc > t),
        Rule::CompareRaw => ci >= cc,
        Rule::ComparePercentile => oracle_percentile(ci, ri) >= oracle_percentile(cc, rc),
    }
}

fn criterion_2() -> Outcome {
    // Coarse grid so ties between scores, thresholds and references are common.
    let grid = |rng: &mut ChaCha8Rng| rng.gen_range(0..=20) as f64 / 20.0;
    for (ri, &rule) in Rule::ALL.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + ri as u64);
        for case in 0..1000 {
            let ci = grid(&mut rng);
            let cc = grid(&mut rng);
            let t = grid(&mut rng);
            let verdict = rng.gen_bool(0.5);
            let n_ref = rng.gen_range(1..=8);
            let ref_i: Vec<f64> = (0..n_ref).map(|_| grid(&mut rng)).collect();
            let ref_c: Vec<f64> = (0..rng.gen_range(1..=8)).map(|_| grid(&mut rng)).collect();
            let spec = RuleSpec {
                rule,
                threshold: Some(t),
                internal_reference: Some(PercentileReference::new(ref_i.clone()).unwrap()),
                context_reference: Some(PercentileReference::new(ref_c.clone()).unwrap()),
            };
            let internal = record("internal answer", Some(ci), Source::Internal);
            let context = record("context answer", Some(cc), Source::Context);
            let d = rule_select(&internal, &context, &spec, Some(verdict)).map_err(|e| e.to_string())?;
            let want_internal = oracle_rule(rule, ci, cc, t, verdict, &ref_i, &ref_c);
            let (want_answer, want_source) = if want_internal {
                ("internal answer", DecisionSource::Internal)
            } else {
                ("context answer", DecisionSource::Context)
            };
            ensure(d.final_answer == want_answer && d.source == want_source, || {
                format!("{rule} case {case}: ci={ci} cc={cc} t={t} verdict={verdict} got {:?}", d.source)
            })?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3. Isotonic regression

/// Least-squares monotone fit by enumerating every split of the distinct
/// scores into contiguous blocks. Returns the fitted value per distinct score.
fn brute_isotonic(points: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let mut distinct: Vec<(f64, f64, f64)> = Vec::new(); // score, sum y, count
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (s, y) in sorted {
        let y = if y { 1.0 } else { 0.0 };
        match distinct.last_mut() {
            Some(last) if last.0 == s => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => distinct.push((s, y, 1.0)),
        }
    }
    let m = distinct.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (m - 1)) {
        let mut fitted = vec![0.0; m];
        let mut start = 0;
        let mut prev_mean = f64::NEG_INFINITY;
        let mut ok = true;
        let mut sse = 0.0;
        for i in 0..m {
            let cut = i == m - 1 || mask & (1 << i) != 0;
            if !cut {
                continue;
            }
            let block = &distinct[start..=i];
            let sum: f64 = block.iter().map(|b| b.1).sum();
            let cnt: f64 = block.iter().map(|b| b.2).sum();
            let mean = sum / cnt;
            if mean < prev_mean - 1e-12 {
                ok = false;
                break;
            }
            prev_mean = mean;
            for (j, b) in block.iter().enumerate() {
                fitted[start + j] = mean;
                // Squared error of b.2 points with b.1 ones around `mean`.
                sse += b.1 * (1.0 - mean).powi(2) + (b.2 - b.1) * mean.powi(2);
            }
            start = i + 1;
        }
        if ok && best.as_ref().map_or(true, |(b, _)| sse < *b - 1e-12) {
            best = Some((sse, fitted));
        }
    }
    let fitted = best.expect("one block is always monotone").1;
    distinct.iter().zip(fitted).map(|(d, f)| (d.0, f)).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.gen_range(2..=12);
        let points: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.gen_range(0..=10) as f64 / 10.0, rng.gen_bool(0.5)))
            .collect();
        let map = IsotonicMap::fit(&points).map_err(|e| e.to_string())?;
        for (score, want) in brute_isotonic(&points) {
            let got = map.apply(score);
            ensure((got - want).abs() <= 1e-9, || format!("case {case}: f({score}) = {got}, brute force {want}"))?;
        }
        let scores: Vec<f64> = points.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
        let fitted: Vec<f64> = scores.iter().map(|&s| map.apply(s)).collect();
        let pre = ece(&scores, &labels, 10).map_err(|e| e.to_string())?;
        let post = ece(&fitted, &labels, 10).map_err(|e| e.to_string())?;
        ensure(post <= pre + 1e-12, || format!("case {case}: ECE rose from {pre} to {post}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 4. AUC, percentile invariance, ECE hand cases

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut done = 0;
    while done < 100 {
        let n = rng.gen_range(2..=15);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let got = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&scores, &labels);
        ensure((got - want).abs() <= 1e-12, || format!("AUC {got} vs pairwise {want}"))?;
        done += 1;
    }

    let transforms: Vec<Box<dyn Fn(f64) -> f64>> = vec![
        Box::new(|x| 2.0 * x + 1.0),
        Box::new(|x| x * x * x),
        Box::new(f64::exp),
        Box::new(|x| (x + 1.0).ln()),
        Box::new(|x| x.sqrt()),
        Box::new(|x| 1.0 / (1.0 + (-8.0 * (x - 0.5)).exp())),
        Box::new(|x| x.powf(0.3) * 100.0),
        Box::new(|x| (3.0 * x).sinh()),
        Box::new(|x| x / (2.0 - x)),
        Box::new(|x| 10f64.powf(x) - 7.0),
    ];
    for case in 0..20 {
        let reference: Vec<f64> = (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..=50) as f64 / 50.0).collect();
        let x = rng.gen_range(0..=50) as f64 / 50.0;
        let base = percentile(x, &reference).map_err(|e| e.to_string())?;
        for (k, f) in transforms.iter().enumerate() {
            let moved: Vec<f64> = reference.iter().map(|&r| f(r)).collect();
            let p = percentile(f(x), &moved).map_err(|e| e.to_string())?;
            ensure(p == base, || format!("case {case} transform {k}: {p} vs {base}"))?;
        }
    }

    let one_bin = ece(&[0.75, 0.25], &[true, true], 1).map_err(|e| e.to_string())?;
    ensure(one_bin == 0.5, || format!("single bin ECE {one_bin}"))?;
    let single = ece(&[0.875, 0.625, 0.75], &[true, false, true], 1).map_err(|e| e.to_string())?;
    ensure((single - (0.75 - 2.0 / 3.0)).abs() < 1e-15, || format!("single bin ECE {single}"))?;
    let split = ece(&[0.875, 0.625], &[true, false], 10).map_err(|e| e.to_string())?;
    ensure(split == 0.375, || format!("two-bin ECE {split}"))?;
    let perfect = ece(&[1.0, 1.0], &[true, true], 10).map_err(|e| e.to_string())?;
    ensure(perfect == 0.0, || format!("perfect ECE {perfect}"))
}

// ---------------------------------------------------------------------------
// 5. Threshold tuning

/// SF scaled by n_true * n_false, from exact counts.
fn oracle_sf(records: &[TuneRecord], orientation: Orientation, t: f64) -> usize {
    let (mut ct, mut nt, mut cf, mut nf) = (0, 0, 0, 0);
    for r in records {
        let internal = match orientation {
            Orientation::Internal => r.confidence > t,
            Orientation::Context => r.confidence <= t,
        };
        let ok = if internal { r.internal_correct } else { r.context_correct } as usize;
        match r.condition {
            EvalCondition::TrueContext => {
                ct += ok;
                nt += 1
            }
            _ => {
                cf += ok;
                nf += 1
            }
        }
    }
    ct * nf + cf * nt
}

fn criterion_5() -> Outcome {
    for set in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + set);
        let n = rng.gen_range(4..=40);
        let mut records: Vec<TuneRecord> = (0..n)
            .map(|i| TuneRecord {
                confidence: rng.gen_range(1..=100) as f64 / 100.0,
                condition: if i % 2 == 0 { EvalCondition::TrueContext } else { EvalCondition::FalseContext },
                internal_correct: rng.gen_bool(0.6),
                context_correct: i % 2 == 0 && rng.gen_bool(0.9),
            })
            .collect();
        if set % 5 == 0 {
            records.iter_mut().for_each(|r| r.confidence = (r.confidence * 4.0).ceil() / 4.0);
        }
        for orientation in [Orientation::Internal, Orientation::Context] {
            let got = tune_threshold(&records, orientation).map_err(|e| e.to_string())?;
            let mut best = (0usize, -1.0);
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let s = oracle_sf(&records, orientation, t);
                if best.1 < 0.0 || s > best.0 {
                    best = (s, t);
                }
            }
            ensure(got == best.1, || format!("set {set} {orientation:?}: tuned {got}, exhaustive argmax {}", best.1))?;
        }

        let min_pos = records.iter().map(|r| r.confidence).filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
        for r in &records {
            let internal = record("i", Some(r.confidence), Source::Internal);
            let context = record("c", Some(r.confidence), Source::Context);
            let at_one = rule_select(&internal, &context, &RuleSpec::threshold_internal(1.0), None)
                .map_err(|e| e.to_string())?;
            ensure(at_one.source == DecisionSource::Context, || format!("set {set}: t=1.0 kept internal"))?;
            let below = rule_select(&internal, &context, &RuleSpec::threshold_internal(min_pos / 2.0), None)
                .map_err(|e| e.to_string())?;
            ensure(below.source == DecisionSource::Internal, || format!("set {set}: low threshold chose context"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 6. Token-recall filter

fn criterion_6() -> Outcome {
    ensure(DEFAULT_WINDOW_MULT == 3 && DEFAULT_RECALL_THRESHOLD == 0.5, || "defaults changed".into())?;
    let gold = "Leonardo da Vinci"; // 3 tokens: window 9
    let filler = |k: usize| vec!["word"; k].join(" ");
    // Gold starts exactly 9 tokens from the end: inside.
    let inside = format!("{gold} {}", filler(6));
    ensure(token_recall_tail(&inside, gold, 3, 0.5).pass, || "gold at window edge rejected".into())?;
    // One token further back and the first gold token falls out of the window.
    let outside = format!("{gold} {}", filler(7));
    let s = token_recall_tail(&outside, gold, 3, 0.5);
    ensure((s.score - 2.0 / 3.0).abs() < 1e-12, || format!("window is not 9 tokens: {s:?}"))?;
    let outside2 = format!("{gold} {}", filler(9));
    ensure(token_recall_tail(&outside2, gold, 3, 0.5).score == 0.0, || "window too wide".into())?;
    // Strict > 0.5: two of four tokens is exactly 0.5 and fails.
    let half = token_recall_tail("alpha beta", "alpha beta gamma delta", 3, 0.5);
    ensure(half.score == 0.5 && !half.pass, || format!("half recall {half:?}"))?;
    let more = token_recall_tail("alpha beta gamma", "alpha beta gamma delta", 3, 0.5);
    ensure(more.pass, || "0.75 recall rejected".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut omit: Vec<usize> = (0..1000).collect();
    for i in 0..21 {
        let j = rng.gen_range(i..1000);
        omit.swap(i, j);
    }
    let omit: std::collections::HashSet<usize> = omit[..21].iter().copied().collect();
    let golds = ["Pacific Ocean", "Au", "seven", "George Orwell", "Leonardo da Vinci"];
    let mut rejected = 0;
    for i in 0..1000 {
        let g = golds[i % golds.len()];
        let body = format!("Step {i}: I recall several related facts and compare them with the document.");
        let tail = if omit.contains(&i) {
            "\nSo I stay with what I concluded above.".to_string()
        } else {
            format!("\nTherefore, the final answer is:\n{g}")
        };
        if !validate_chosen(&(body + &tail), &[g.to_string()]) {
            rejected += 1;
        }
    }
    ensure(rejected == 21, || format!("{rejected} rejections"))
}

// ---------------------------------------------------------------------------
// 7. Prompt fidelity

fn golden_bindings() -> Bindings {
    Bindings::new()
        .with("question", "Who wrote the novel 1984?")
        .with("document", "The novel 1984 was written by Aldous Huxley.")
        .with("internal_answer", "George Orwell")
        .with("doc_answer", "Aldous Huxley")
        .with("model_answer", "George Orwell")
        .with("gold_answer", "George Orwell | Orwell")
}

fn criterion_7() -> Outcome {
    let dir = manifest_dir().join("tests/golden");
    let update = std::env::var_os("SITUATED_UPDATE_GOLDEN").is_some();
    let set = TemplateSet::builtin();
    let b = golden_bindings();
    let mut checked = 0;
    for name in TemplateName::ALL {
        let variants: &[u32] = if set.get(name).variant1_body.is_some() { &[0, 1] } else { &[0] };
        for &v in variants {
            let text = set.render_text(name, &b, v).map_err(|e| e.to_string())?;
            let file = if v == 0 { format!("{name}.txt") } else { format!("{name}.variant1.txt") };
            let path = dir.join(&file);
            if update {
                fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                fs::write(&path, &text).map_err(|e| e.to_string())?;
            }
            let want = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            ensure(text == want, || format!("{file} differs from golden"))?;
            checked += 1;
        }
    }
    ensure(checked == TemplateName::ALL.len() + 2, || format!("{checked} golden files checked"))?;

    let q = "Question: Who wrote the novel 1984?";
    let d = "Document: The novel 1984 was written by Aldous Huxley.";
    let implicit = set.render_text(TemplateName::ImplicitScr, &b, 0).map_err(|e| e.to_string())?;
    let (qi, di) = (implicit.rfind(q).ok_or("no question")?, implicit.rfind(d).ok_or("no document")?);
    ensure(qi < di, || "ImplicitSCR puts the document first".into())?;
    let dia = set.render_text(TemplateName::Dia, &b, 0).map_err(|e| e.to_string())?;
    let (qd, dd) = (dia.rfind(q).ok_or("no question")?, dia.rfind(d).ok_or("no document")?);
    ensure(dd < qd, || "DIA puts the question first".into())?;

    ensure(
        Pattern::InternalWrongContextRight.chosen_template() == TemplateName::CrdpoDocCorrect
            && Pattern::InternalWrongContextRight.rejected_template() == TemplateName::CrdpoDocDeceptive
            && Pattern::InternalRightContextWrong.chosen_template() == TemplateName::CrdpoDocDeceptive
            && Pattern::InternalRightContextWrong.rejected_template() == TemplateName::CrdpoDocCorrect,
        || "CR-DPO template mapping".into(),
    )?;
    let correct = set.render_text(TemplateName::CrdpoDocCorrect, &b, 0).map_err(|e| e.to_string())?;
    let deceptive = set.render_text(TemplateName::CrdpoDocDeceptive, &b, 0).map_err(|e| e.to_string())?;
    ensure(
        correct.contains("Your answer is wrong and the document's answer is correct")
            && deceptive.contains("Your answer is correct and the document's answer is deceptive"),
        || "CR-DPO role statements".into(),
    )
}

// ---------------------------------------------------------------------------
// 8. End-to-end determinism

const EVAL_METHODS: [&str; 8] =
    ["closed_book", "dia", "implicit_scr", "explicit_scr", "internal_eval", "internal_conf", "tpc", "ctpc"];

/// Expected (true-context, false-context) answers per method and instance,
/// replayed by hand from the mock script. `I`/`C` mark which side a rule
/// method picked.
const EXPECTED: &[(&str, &str, (&str, char), (&str, char))] = &[
    ("closed_book", "tq-1", ("Canberra", 'I'), ("Canberra", 'I')),
    ("closed_book", "tq-2", ("Mars", 'I'), ("Mars", 'I')),
    ("closed_book", "tq-3", ("George Orwell", 'I'), ("George Orwell", 'I')),
    ("closed_book", "pq-4", ("physicist", 'I'), ("physicist", 'I')),
    ("closed_book", "pq-5", ("Japan", 'I'), ("Japan", 'I')),
    ("closed_book", "pq-6", ("blues", 'I'), ("blues", 'I')),
    ("dia", "tq-1", ("Canberra", 'B'), ("Sydney", 'B')),
    ("dia", "tq-2", ("Mars", 'B'), ("Mars", 'B')),
    ("dia", "tq-3", ("George Orwell", 'B'), ("Aldous Huxley", 'B')),
    ("dia", "pq-4", ("mathematician", 'B'), ("painter", 'B')),
    ("dia", "pq-5", ("Japan", 'B'), ("China", 'B')),
    ("dia", "pq-6", ("jazz", 'B'), ("country", 'B')),
    ("implicit_scr", "tq-1", ("Canberra", 'B'), ("Canberra", 'B')),
    ("implicit_scr", "tq-2", ("Mars", 'B'), ("Mars", 'B')),
    ("implicit_scr", "tq-3", ("George Orwell", 'B'), ("Aldous Huxley", 'B')),
    ("implicit_scr", "pq-4", ("mathematician", 'B'), ("painter", 'B')),
    ("implicit_scr", "pq-5", ("Japan", 'B'), ("Japan", 'B')),
    ("implicit_scr", "pq-6", ("jazz", 'B'), ("country", 'B')),
    ("explicit_scr", "tq-1", ("Canberra", 'B'), ("Canberra", 'B')),
    ("explicit_scr", "tq-2", ("Mars", 'B'), ("Mars", 'B')),
    ("explicit_scr", "tq-3", ("George Orwell", 'B'), ("George Orwell", 'B')),
    ("explicit_scr", "pq-4", ("mathematician", 'B'), ("painter", 'B')),
    ("explicit_scr", "pq-5", ("Japan", 'B'), ("Japan", 'B')),
    ("explicit_scr", "pq-6", ("jazz", 'B'), ("country", 'B')),
    // Verdicts: True, True, False, True, False, False.
    ("internal_eval", "tq-1", ("Canberra", 'I'), ("Canberra", 'I')),
    ("internal_eval", "tq-2", ("Mars", 'I'), ("Mars", 'I')),
    ("internal_eval", "tq-3", ("George Orwell", 'C'), ("Aldous Huxley", 'C')),
    ("internal_eval", "pq-4", ("physicist", 'I'), ("physicist", 'I')),
    ("internal_eval", "pq-5", ("Japan", 'C'), ("China", 'C')),
    ("internal_eval", "pq-6", ("jazz", 'C'), ("country", 'C')),
    // Internal confidences e^-0.05, e^-0.4, e^-0.9, e^-0.3, e^-1.2, e^-1.6 against 0.5.
    ("internal_conf", "tq-1", ("Canberra", 'I'), ("Canberra", 'I')),
    ("internal_conf", "tq-2", ("Mars", 'I'), ("Mars", 'I')),
    ("internal_conf", "tq-3", ("George Orwell", 'C'), ("Aldous Huxley", 'C')),
    ("internal_conf", "pq-4", ("physicist", 'I'), ("physicist", 'I')),
    ("internal_conf", "pq-5", ("Japan", 'C'), ("China", 'C')),
    ("internal_conf", "pq-6", ("jazz", 'C'), ("country", 'C')),
    // Context confidences: true e^-0.02, e^-0.1, e^-0.2, e^-0.05, e^-0.1, e^-0.15;
    // false e^-0.5, e^-0.3, e^-0.6, e^-0.2, e^-1.5, e^-0.4.
    ("tpc", "tq-1", ("Canberra", 'C'), ("Canberra", 'I')),
    ("tpc", "tq-2", ("Mars", 'C'), ("Jupiter", 'C')),
    ("tpc", "tq-3", ("George Orwell", 'C'), ("Aldous Huxley", 'C')),
    ("tpc", "pq-4", ("mathematician", 'C'), ("painter", 'C')),
    ("tpc", "pq-5", ("Japan", 'C'), ("Japan", 'I')),
    ("tpc", "pq-6", ("jazz", 'C'), ("country", 'C')),
    // Percentiles against the fixture references; ties keep the internal answer.
    ("ctpc", "tq-1", ("Canberra", 'I'), ("Canberra", 'I')),
    ("ctpc", "tq-2", ("Mars", 'I'), ("Mars", 'I')),
    ("ctpc", "tq-3", ("George Orwell", 'I'), ("George Orwell", 'I')),
    ("ctpc", "pq-4", ("physicist", 'I'), ("physicist", 'I')),
    ("ctpc", "pq-5", ("Japan", 'I'), ("Japan", 'I')),
    ("ctpc", "pq-6", ("jazz", 'C'), ("blues", 'I')),
];

fn run_cli(args: &[String]) -> Outcome {
    let mut argv = vec!["situated".to_string()];
    argv.extend_from_slice(args);
    let code = cli::dispatch(argv.clone());
    ensure(code == 0, || format!("exit {code} for {argv:?}"))
}

fn evaluate_args(fixture: &Path, out: &Path) -> Vec<String> {
    let mut a = vec![
        "evaluate".to_string(),
        "--dataset".into(),
        fixture.join("dataset.jsonl").display().to_string(),
        "--backend".into(),
        "mock".into(),
        "--mock-script".into(),
        fixture.join("mock_script.json").display().to_string(),
        "--calibration-dir".into(),
        fixture.join("calibration").display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--seed".into(),
        "7".into(),
        "--max-concurrency".into(),
        "4".into(),
    ];
    for m in EVAL_METHODS {
        a.push("--method".into());
        a.push(m.into());
    }
    a
}

fn criterion_8() -> Outcome {
    let fixture = manifest_dir().join("tests/fixtures/eval");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_cli(&evaluate_args(&fixture, &a))?;
    run_cli(&evaluate_args(&fixture, &b))?;
    for f in [cli::DECISIONS_FILE, cli::REPORT_CSV] {
        let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    let text = fs::read_to_string(a.join(cli::DECISIONS_FILE)).map_err(|e| e.to_string())?;
    let records: Vec<DecisionRecord> =
        text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(records.len() == EVAL_METHODS.len() * 12, || format!("{} decisions", records.len()))?;
    let mut seen = 0;
    for &(method, id, t, f) in EXPECTED {
        for (cond, (answer, side)) in [(EvalCondition::TrueContext, t), (EvalCondition::FalseContext, f)] {
            let r = records
                .iter()
                .find(|r| r.method == method && r.instance_id == id && r.condition == cond)
                .ok_or_else(|| format!("missing {method} {id} {cond}"))?;
            let want_source = match side {
                'I' => DecisionSource::Internal,
                'C' => DecisionSource::Context,
                _ => DecisionSource::Blended,
            };
            ensure(r.decision.final_answer == answer && r.decision.source == want_source, || {
                format!(
                    "{method} {id} {cond}: got {:?} ({:?}), expected {answer:?} ({want_source:?})",
                    r.decision.final_answer, r.decision.source
                )
            })?;
            seen += 1;
        }
    }
    ensure(seen == EVAL_METHODS.len() * 12, || format!("{seen} expectations checked"))
}

// ---------------------------------------------------------------------------
// 9. CR-DPO bundle

fn criterion_9() -> Outcome {
    let fixture = manifest_dir().join("tests/fixtures/crdpo");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("bundle");
    run_cli(&[
        "gen-crdpo".into(),
        "--dataset".into(),
        fixture.join("dataset.jsonl").display().to_string(),
        "--mock-script".into(),
        fixture.join("mock_script.json").display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--no-cache".into(),
    ])?;
    let text = fs::read_to_string(out.join("pairs.jsonl")).map_err(|e| e.to_string())?;
    let pairs = parse_pairs_jsonl(&text).map_err(|e| e.to_string())?;
    ensure(!pairs.is_empty() && pairs.len() <= 8, || format!("{} pairs from 4 eligible instances", pairs.len()))?;
    let dataset = fs::read_to_string(fixture.join("dataset.jsonl")).map_err(|e| e.to_string())?;
    let golds: BTreeMap<String, Vec<String>> = dataset
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let g = v["gold_answers"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
            (v["id"].as_str().unwrap().to_string(), g)
        })
        .collect();
    for p in &pairs {
        ensure(validate_chosen(&p.chosen, &golds[&p.instance_id]), || {
            format!("{} variant {}: chosen path fails validation", p.instance_id, p.variant)
        })?;
        ensure(p.chosen != p.rejected, || format!("{}: identical pair", p.instance_id))?;
    }
    let reencoded: String = pairs.iter().map(|p| p.to_json_line() + "\n").collect();
    ensure(reencoded == text, || "pairs.jsonl does not round-trip".into())?;

    let cfg_text = fs::read_to_string(out.join("train_config.toml")).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::from_toml(&cfg_text).map_err(|e| e.to_string())?;
    ensure(
        cfg.learning_rate == 5e-6
            && cfg.beta == 0.1
            && cfg.rpo_alpha == 1.0
            && cfg.lora_r == 8
            && cfg.lora_alpha == 16
            && cfg.lora_dropout == 0.1
            && cfg.num_train_epochs == 5
            && cfg.warmup_steps == 100
            && cfg.max_length == 900
            && cfg.max_prompt_length == 600,
        || format!("train config {cfg:?}"),
    )
}

// ---------------------------------------------------------------------------
// 10. CTPC reversal

fn criterion_10() -> Outcome {
    // Internal calibration scores spread evenly; context scores piled up near 1.
    let internal_ref: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
    let context_ref = vec![0.88, 0.9, 0.92, 0.94, 0.95, 0.96, 0.97, 0.98, 0.99, 0.995];
    let spec = RuleSpec::compare_percentile(
        PercentileReference::new(internal_ref.clone()).unwrap(),
        PercentileReference::new(context_ref.clone()).unwrap(),
    );
    let mut reversals = 0;
    for (ci, cc) in [(0.8, 0.91), (0.7, 0.93), (0.3, 0.99), (0.85, 0.89)] {
        let internal = record("internal answer", Some(ci), Source::Internal);
        let context = record("context answer", Some(cc), Source::Context);
        let raw = rule_select(&internal, &context, &RuleSpec::compare_raw(), None).map_err(|e| e.to_string())?;
        let pct = rule_select(&internal, &context, &spec, None).map_err(|e| e.to_string())?;
        if raw.source == DecisionSource::Context && pct.source == DecisionSource::Internal {
            reversals += 1;
        }
        // Hand replay: counts below the score over reference size.
        let pi = oracle_percentile(ci, &internal_ref);
        let pc = oracle_percentile(cc, &context_ref);
        let want = if pc > pi { DecisionSource::Context } else { DecisionSource::Internal };
        ensure(pct.source == want, || format!("({ci}, {cc}): pct {pi} vs {pc}"))?;
    }
    // (0.8, 0.91): internal percentile 0.8, context 0.2. Raw picks context, percentile internal.
    ensure(oracle_percentile(0.8, &internal_ref) == 0.8 && oracle_percentile(0.91, &context_ref) == 0.2, || {
        "hand-computed percentiles".into()
    })?;
    ensure(reversals >= 1, || "no reversal".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric arithmetic matches Table 1 OV", criterion_1),
        ("rule_select equals brute-force oracle", criterion_2),
        ("isotonic PAV equals brute force; ECE does not rise", criterion_3),
        ("AUC, percentile invariance, ECE hand cases", criterion_4),
        ("threshold tuning finds the grid argmax", criterion_5),
        ("token-recall window and filter rate", criterion_6),
        ("prompt golden files and ordering", criterion_7),
        ("end-to-end evaluate determinism and replay", criterion_8),
        ("CR-DPO bundle", criterion_9),
        ("CTPC reversal", criterion_10),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(()) => println!("criterion {:>2}: PASS  {name}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name}: {e}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed in {:.1?}", criteria.len() - failed, criteria.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
