//! Evaluation engine: threshold metrics, tie-aware ranking AUC,
//! patient-level stratified cross-validation folds, and an experiment
//! runner that aggregates per-fold results and writes CSV artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::HarnessConfig;
use crate::nn::stream_rng;
use crate::{Error, Result};

/// Counts of the four decision outcomes at a threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    /// False negatives (`fn` is reserved).
    pub fn_: usize,
}

/// The five summary statistics plus the confusion they derive from.
/// `per_fold` is filled by the experiment runner; leaf reports leave it
/// empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    pub f1: f64,
    /// Absent when the labels contain a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub threshold: f64,
    pub per_fold: Vec<MetricsReport>,
}

/// Pairwise ranking statistic with half credit for ties, computed through
/// average ranks. `None` when either class is missing.
fn ranking_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg_rank = (i + j) as f64 * 0.5 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 * 0.5;
    Some(u / (n_pos * n_neg) as f64)
}

/// Confusion at `threshold` (scores at or above it call positive) plus the
/// derived statistics; ratios with an empty denominator report zero.
pub fn compute_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Input("cannot compute metrics on zero predictions".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let acc = ratio(c.tp + c.tn, scores.len());
    let se = ratio(c.tp, c.tp + c.fn_);
    let sp = ratio(c.tn, c.tn + c.fp);
    let prec = ratio(c.tp, c.tp + c.fp);
    let f1 = if prec + se == 0.0 { 0.0 } else { 2.0 * prec * se / (prec + se) };
    Ok(MetricsReport {
        acc,
        se,
        sp,
        f1,
        auc: ranking_auc(scores, labels),
        confusion: c,
        threshold,
        per_fold: Vec::new(),
    })
}

/// Threshold maximising Youden's J (se + sp − 1) over the candidate cuts
/// between adjacent distinct scores; ties resolve to the lowest threshold.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(*sorted.last().unwrap() + 1.0);
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &t in &candidates {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count();
        let tn = scores.iter().zip(labels).filter(|(&s, &l)| s < t && !l).count();
        let se = if n_pos == 0 { 0.0 } else { tp as f64 / n_pos as f64 };
        let sp = if n_neg == 0 { 0.0 } else { tn as f64 / n_neg as f64 };
        let j = se + sp - 1.0;
        if j > best.0 + 1e-12 {
            best = (j, t);
        }
    }
    best.1
}

/// Split cases into `k` disjoint folds at patient granularity, stratified
/// by label: every case of a patient lands in one fold, and per-fold
/// positive counts differ by at most one patient.
///
/// Returns case-index lists per fold, each sorted ascending.
pub fn make_folds(cases: &[(&str, bool)], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    let mut patients: BTreeMap<&str, (bool, Vec<usize>)> = BTreeMap::new();
    for (i, (id, label)) in cases.iter().enumerate() {
        let entry = patients.entry(id).or_insert((*label, Vec::new()));
        if entry.0 != *label {
            return Err(Error::Input(format!("patient {id} appears with conflicting labels")));
        }
        entry.1.push(i);
    }
    if patients.len() < k {
        return Err(Error::TooFewPatients(format!(
            "{} distinct patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut pos: Vec<&str> = patients.iter().filter(|(_, v)| v.0).map(|(id, _)| *id).collect();
    let mut neg: Vec<&str> = patients.iter().filter(|(_, v)| !v.0).map(|(id, _)| *id).collect();
    let mut rng = stream_rng(seed, 40);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, id) in pos.iter().enumerate() {
        folds[j % k].extend(&patients[id].1);
    }
    // Continue dealing where the positives stopped so fold sizes stay even.
    let offset = pos.len() % k;
    for (j, id) in neg.iter().enumerate() {
        folds[(offset + j) % k].extend(&patients[id].1);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    let mut seen = vec![false; cases.len()];
    for fold in &folds {
        for &i in fold {
            assert!(!seen[i], "fold construction duplicated case {i}");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "fold construction dropped a case");
    Ok(folds)
}

/// One evaluated model: the aggregated report (per-fold details inside)
/// and the pooled ROC polyline as (false-positive rate, sensitivity).
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub name: String,
    pub report: MetricsReport,
    pub roc: Vec<(f64, f64)>,
}

/// ROC points swept over descending score cuts, including both endpoints.
fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((
            if n_neg == 0 { 0.0 } else { fp as f64 / n_neg as f64 },
            if n_pos == 0 { 0.0 } else { tp as f64 / n_pos as f64 },
        ));
        i = j + 1;
    }
    points
}

/// Cross-validated evaluation of one model. `fit_and_score` receives
/// (fold index, train case indices, test case indices) and returns one
/// score per test case; fold failures come back tagged with their fold.
///
/// Aggregation follows the configuration: macro-averaged fold metrics by
/// default (the summed confusion is attached for reference), or metrics of
/// the pooled predictions when `pooled` is set. With `youden_threshold`
/// each fold picks the cut maximising Youden's J on its own predictions;
/// the pooled report always uses the configured threshold.
pub fn run_experiment<F>(
    name: &str,
    cases: &[(&str, bool)],
    cfg: &HarnessConfig,
    seed: u64,
    mut fit_and_score: F,
) -> Result<ExperimentOutcome>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<Vec<f64>>,
{
    let folds = make_folds(cases, cfg.folds, seed)?;
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> =
            folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, v)| v.iter().copied()).collect();
        let scores = fit_and_score(f, &train, test)
            .map_err(|e| Error::Fold { fold: f, source: Box::new(e) })?;
        if scores.len() != test.len() {
            return Err(Error::Fold {
                fold: f,
                source: Box::new(Error::Input(format!(
                    "{} scores for {} held-out cases",
                    scores.len(),
                    test.len()
                ))),
            });
        }
        let labels: Vec<bool> = test.iter().map(|&i| cases[i].1).collect();
        let threshold = if cfg.youden_threshold {
            youden_threshold(&scores, &labels)
        } else {
            cfg.threshold
        };
        per_fold.push(
            compute_metrics(&scores, &labels, threshold)
                .map_err(|e| Error::Fold { fold: f, source: Box::new(e) })?,
        );
        pooled_scores.extend(scores);
        pooled_labels.extend(labels);
    }
    let roc = roc_points(&pooled_scores, &pooled_labels);
    let mut report = if cfg.pooled {
        compute_metrics(&pooled_scores, &pooled_labels, cfg.threshold)?
    } else {
        macro_average(&per_fold)
    };
    report.per_fold = per_fold;
    Ok(ExperimentOutcome { name: name.to_string(), report, roc })
}

/// Metrics and ROC for one already-scored set of cases — the single-split
/// counterpart of [`run_experiment`] for externally produced scores.
pub fn score_outcome(
    name: &str,
    scores: &[f64],
    labels: &[bool],
    cfg: &HarnessConfig,
) -> Result<ExperimentOutcome> {
    let threshold =
        if cfg.youden_threshold { youden_threshold(scores, labels) } else { cfg.threshold };
    let report = compute_metrics(scores, labels, threshold)?;
    Ok(ExperimentOutcome {
        name: name.to_string(),
        report,
        roc: roc_points(scores, labels),
    })
}

/// Arithmetic mean of each fold metric; AUC averages the folds where it
/// exists. The confusion is the across-fold sum.
fn macro_average(folds: &[MetricsReport]) -> MetricsReport {
    let n = folds.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| folds.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = folds.iter().filter_map(|r| r.auc).collect();
    let mut confusion = Confusion::default();
    for r in folds {
        confusion.tp += r.confusion.tp;
        confusion.fp += r.confusion.fp;
        confusion.tn += r.confusion.tn;
        confusion.fn_ += r.confusion.fn_;
    }
    MetricsReport {
        acc: mean(&|r| r.acc),
        se: mean(&|r| r.se),
        sp: mean(&|r| r.sp),
        f1: mean(&|r| r.f1),
        auc: if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        },
        confusion,
        threshold: mean(&|r| r.threshold),
        per_fold: Vec::new(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Result table, one row per model:
/// `model,threshold,acc,se,sp,f1,auc,tp,fp,tn,fn`.
pub fn write_results_csv(path: &Path, rows: &[ExperimentOutcome]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("model,threshold,acc,se,sp,f1,auc,tp,fp,tn,fn\n");
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            row.name,
            r.threshold,
            r.acc,
            r.se,
            r.sp,
            r.f1,
            fmt_opt(r.auc),
            r.confusion.tp,
            r.confusion.fp,
            r.confusion.tn,
            r.confusion.fn_
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|source| Error::Io { path: path.to_owned(), source })
}

/// Pooled ROC polylines for every model: `model,fpr,tpr`.
pub fn write_roc_csv(path: &Path, rows: &[ExperimentOutcome]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("model,fpr,tpr\n");
    for row in rows {
        for &(fpr, tpr) in &row.roc {
            writeln!(out, "{},{fpr:.6},{tpr:.6}", row.name).expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|source| Error::Io { path: path.to_owned(), source })
}

/// Fixed-width human-readable rendering of the result table.
pub fn render_results_table(rows: &[ExperimentOutcome]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(out, "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6}", "model", "acc", "se", "sp", "f1", "auc")
        .expect("string write");
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{:<10} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6}",
            row.name,
            r.acc,
            r.se,
            r.sp,
            r.f1,
            r.auc.map_or("-".into(), |a| format!("{a:.3}")),
        )
        .expect("string write");
    }
    out
}
