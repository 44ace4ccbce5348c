//! Metrics, agreement statistics, ablations and CSV emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSession, ModelVariant, Usefulness};
use crate::nam::{Example, ModelError, RiskModel};
use crate::ranker::{self, RankError, Strategy};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Input(String),
    #[error("multi-seed evaluation needs at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("csv {path}: {message}")]
    Csv { path: String, message: String },
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk groups of tied scores from lowest to highest
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let group_pos = group.iter().filter(|&&k| labels[k]).count();
        let group_neg = group.len() - group_pos;
        wins += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        i = j;
    }
    Some(wins / (pos as f64 * neg as f64))
}

/// Mean per-condition AUROC; `None` if any condition is single-class.
pub fn macro_auroc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    let values: Option<Vec<f64>> = scores.iter().zip(labels).map(|(s, l)| auroc(s, l)).collect();
    values.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions: precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels: recall reported as 0.
    pub recall_undefined: bool,
}

/// Precision, recall and F1 predicting positive when `p >= threshold`.
pub fn prf1(probabilities: &[f64], labels: &[bool], threshold: f64) -> Prf1 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, y) in probabilities.iter().zip(labels) {
        match (*p >= threshold, *y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 {
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_condition: BTreeMap<String, Metrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Metrics,
    pub n_examples: usize,
    pub seed: u64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores every example with `model` and reports per-condition and macro
/// metrics. Macro AUROC is absent if any condition's AUROC is.
pub fn metric_report(
    model: &RiskModel,
    examples: &[Example],
    threshold: f64,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    let predictions = examples
        .iter()
        .map(|ex| model.predict(&ex.features).map(|p| p.probabilities))
        .collect::<Result<Vec<_>, _>>()?;
    report_from_probabilities(model.conditions.as_slice(), &predictions, examples, threshold, seed)
}

fn report_from_probabilities(
    conditions: &[String],
    predictions: &[Vec<f64>],
    examples: &[Example],
    threshold: f64,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Input("no examples to evaluate".into()));
    }
    let mut per_condition = BTreeMap::new();
    for (i, c) in conditions.iter().enumerate() {
        let probs: Vec<f64> = predictions.iter().map(|p| p[i]).collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.labels[i]).collect();
        let m = prf1(&probs, &labels, threshold);
        per_condition.insert(
            c.clone(),
            Metrics {
                auroc: auroc(&probs, &labels),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            },
        );
    }
    let column = |f: fn(&Metrics) -> f64| mean(&per_condition.values().map(f).collect::<Vec<_>>());
    let aurocs: Option<Vec<f64>> = per_condition.values().map(|m| m.auroc).collect();
    let macro_avg = Metrics {
        auroc: aurocs.map(|v| mean(&v)),
        precision: column(|m| m.precision),
        recall: column(|m| m.recall),
        f1: column(|m| m.f1),
    };
    Ok(MetricReport {
        per_condition,
        macro_avg,
        n_examples: examples.len(),
        seed,
    })
}

/// Fleiss' kappa for an items × categories count table with a constant
/// number of raters per item. Perfect agreement yields 1 even when only one
/// category is ever used.
pub fn fleiss_kappa(table: &[Vec<usize>]) -> Result<f64, EvalError> {
    let Some(first) = table.first() else {
        return Err(EvalError::Input("kappa needs at least one item".into()));
    };
    let k = first.len();
    let n: usize = first.iter().sum();
    if n < 2 {
        return Err(EvalError::Input("kappa needs at least 2 raters per item".into()));
    }
    for (i, row) in table.iter().enumerate() {
        if row.len() != k {
            return Err(EvalError::Input(format!("item {i} has {} categories, expected {k}", row.len())));
        }
        let sum: usize = row.iter().sum();
        if sum != n {
            return Err(EvalError::Input(format!("item {i} has {sum} ratings, expected {n}")));
        }
    }
    let items = table.len() as f64;
    let nf = n as f64;
    let p_bar = table
        .iter()
        .map(|row| row.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf)
        .sum::<f64>()
        / (items * nf * (nf - 1.0));
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = table.iter().map(|row| row[j] as f64).sum::<f64>() / (items * nf);
            pj * pj
        })
        .sum();
    if p_bar == 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Metrics when each example keeps only its top-`k` evidence by mean squared
/// log odds ratio (all of it when it has at most `k`).
pub fn evidence_count_ablation(
    model: &RiskModel,
    examples: &[Example],
    ks: &[usize],
    threshold: f64,
    seed: u64,
) -> Result<BTreeMap<usize, MetricReport>, EvalError> {
    let orders = examples
        .iter()
        .map(|ex| {
            ranker::rank(&ex.snippets, Some(&ex.features), Some(model), Strategy::LogOdds, None)
                .map(|ranked| ranked.into_iter().map(|r| r.source_index).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = BTreeMap::new();
    for &k in ks {
        let predictions = examples
            .iter()
            .zip(&orders)
            .map(|(ex, order)| {
                let kept: Vec<Vec<f64>> = order.iter().take(k).map(|&i| ex.features[i].clone()).collect();
                model.predict(&kept).map(|p| p.probabilities)
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(
            k,
            report_from_probabilities(model.conditions.as_slice(), &predictions, examples, threshold, seed)?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricReport>,
    pub mean: BTreeMap<String, MetricSummary>,
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub stddev: f64,
    /// Seeds contributing (AUROC may be undefined for some).
    pub n: usize,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    if n == 0 {
        return MetricSummary {
            mean: f64::NAN,
            stddev: f64::NAN,
            n,
        };
    }
    let m = mean(values);
    let var = if n > 1 {
        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    MetricSummary {
        mean: m,
        stddev: var.sqrt(),
        n,
    }
}

/// Runs `run` once per seed (which re-splits, trains and evaluates) and
/// summarizes each metric as `{scope}.{metric}`, e.g. `macro.auroc`.
pub fn multi_seed_eval(
    seeds: &[u64],
    mut run: impl FnMut(u64) -> Result<MetricReport, EvalError>,
) -> Result<SeedSummary, EvalError> {
    if seeds.len() < 2 {
        return Err(EvalError::TooFewSeeds(seeds.len()));
    }
    let reports = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>, _>>()?;
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        let scopes = std::iter::once(("macro", &r.macro_avg)).chain(r.per_condition.iter().map(|(c, m)| (c.as_str(), m)));
        for (scope, m) in scopes {
            let mut push = |name: &str, v: Option<f64>| {
                let col = columns.entry(format!("{scope}.{name}")).or_default();
                if let Some(v) = v {
                    col.push(v);
                }
            };
            push("auroc", m.auroc);
            push("precision", Some(m.precision));
            push("recall", Some(m.recall));
            push("f1", Some(m.f1));
        }
    }
    Ok(SeedSummary {
        seeds: seeds.to_vec(),
        reports,
        mean: columns.into_iter().map(|(k, v)| (k, summarize(&v))).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub instances: usize,
    pub evidence: usize,
    pub reports: usize,
    pub useful: usize,
    pub percent_useful: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub per_annotator: BTreeMap<String, AnnotatorStats>,
    pub instances: usize,
    pub evidence: usize,
    pub reports: usize,
    /// Mean of the per-annotator percentages.
    pub percent_useful: Option<f64>,
    /// Highest usefulness per evidence item, counted per model variant.
    pub by_variant: BTreeMap<ModelVariant, BTreeMap<Usefulness, usize>>,
    /// Same, counted per query term (`(none)` for raw sentences).
    pub by_query: BTreeMap<String, BTreeMap<Usefulness, usize>>,
}

/// Aggregates completed sessions: counts are summed over annotators and the
/// useful percentage is macro-averaged over annotators. With
/// `exclude_duplicates`, evidence flagged as a duplicate of a higher-ranked
/// item is left out.
pub fn annotation_stats(sessions: &[AnnotationSession], exclude_duplicates: bool) -> AnnotationStats {
    let mut stats = AnnotationStats::default();
    for s in sessions {
        let a = stats.per_annotator.entry(s.annotator_id.clone()).or_default();
        a.instances += 1;
        a.reports += s.reports_reviewed;
        for ann in &s.annotations {
            let served = s.served.iter().find(|x| x.rank == ann.rank);
            if exclude_duplicates && served.is_some_and(|x| x.duplicate_of.is_some()) {
                continue;
            }
            a.evidence += 1;
            if ann.is_useful() {
                a.useful += 1;
            }
            if let Some(best) = ann.best() {
                *stats.by_variant.entry(s.model_variant).or_default().entry(best).or_default() += 1;
                let query = served
                    .and_then(|x| x.query.clone())
                    .unwrap_or_else(|| "(none)".to_string());
                *stats.by_query.entry(query).or_default().entry(best).or_default() += 1;
            }
        }
    }
    let mut percents = Vec::new();
    for a in stats.per_annotator.values_mut() {
        if a.evidence > 0 {
            let p = 100.0 * a.useful as f64 / a.evidence as f64;
            a.percent_useful = Some(p);
            percents.push(p);
        }
        stats.instances += a.instances;
        stats.evidence += a.evidence;
        stats.reports += a.reports;
    }
    stats.percent_useful = (!percents.is_empty()).then(|| mean(&percents));
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub histogram: String,
    pub condition: String,
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
}

fn histogram(name: &str, condition: &str, values: &[f64], bins: usize) -> Vec<HistogramRow> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramRow {
            histogram: name.to_string(),
            condition: condition.to_string(),
            bin_lower: lo + b as f64 * width,
            bin_upper: lo + (b + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Evidence-count histogram over examples and per-condition histograms of
/// per-evidence log odds ratios.
pub fn histograms(model: &RiskModel, examples: &[Example], bins: usize) -> Result<Vec<HistogramRow>, EvalError> {
    let counts: Vec<f64> = examples.iter().map(|e| e.features.len() as f64).collect();
    let mut rows = histogram("evidence_count", "", &counts, bins);
    let mut votes = vec![Vec::new(); model.num_conditions()];
    for ex in examples {
        for f in &ex.features {
            for (i, v) in model.log_odds(f)?.into_iter().enumerate() {
                votes[i].push(v);
            }
        }
    }
    for (c, v) in model.conditions.iter().zip(&votes) {
        rows.extend(histogram("vote_log_odds", c, v, bins));
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> EvalError + '_ {
    move |e| EvalError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metric_rows(label: &str, r: &MetricReport) -> Vec<Vec<String>> {
    std::iter::once(("macro", &r.macro_avg))
        .chain(r.per_condition.iter().map(|(c, m)| (c.as_str(), m)))
        .map(|(scope, m)| {
            vec![
                label.to_string(),
                scope.to_string(),
                fmt_opt(m.auroc),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
                r.n_examples.to_string(),
            ]
        })
        .collect()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| EvalError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// `metrics.csv`: `seed,condition,auroc,precision,recall,f1,n_examples`;
/// condition `macro` holds the macro averages. Summary rows use seed
/// `mean` / `stddev`.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport], summary: Option<&SeedSummary>) -> Result<(), EvalError> {
    let mut rows: Vec<Vec<String>> = reports.iter().flat_map(|r| metric_rows(&r.seed.to_string(), r)).collect();
    if let Some(s) = summary {
        let scopes: Vec<String> = s.reports[0]
            .per_condition
            .keys()
            .cloned()
            .fold(vec!["macro".to_string()], |mut acc, c| {
                acc.push(c);
                acc
            });
        for (label, pick) in [("mean", 0), ("stddev", 1)] {
            for scope in &scopes {
                let cell = |metric: &str| {
                    s.mean
                        .get(&format!("{scope}.{metric}"))
                        .filter(|m| m.n > 0)
                        .map(|m| format!("{:.6}", if pick == 0 { m.mean } else { m.stddev }))
                        .unwrap_or_default()
                };
                rows.push(vec![
                    label.to_string(),
                    scope.clone(),
                    cell("auroc"),
                    cell("precision"),
                    cell("recall"),
                    cell("f1"),
                    s.reports.iter().map(|r| r.n_examples).sum::<usize>().to_string(),
                ]);
            }
        }
    }
    write_rows(
        path,
        &["seed", "condition", "auroc", "precision", "recall", "f1", "n_examples"],
        rows,
    )
}

/// `ablation.csv`: `k,condition,auroc,precision,recall,f1,n_examples`.
pub fn write_ablation_csv(path: &Path, ablation: &BTreeMap<usize, MetricReport>) -> Result<(), EvalError> {
    write_rows(
        path,
        &["k", "condition", "auroc", "precision", "recall", "f1", "n_examples"],
        ablation.iter().flat_map(|(k, r)| metric_rows(&k.to_string(), r)),
    )
}

/// `query_usefulness.csv`: `group_kind,group,usefulness,count,fraction`,
/// with `group_kind` one of `variant` or `query`.
pub fn write_usefulness_csv(path: &Path, stats: &AnnotationStats) -> Result<(), EvalError> {
    let mut rows = Vec::new();
    let mut push = |kind: &str, group: &str, counts: &BTreeMap<Usefulness, usize>| {
        let total: usize = counts.values().sum();
        for u in Usefulness::ALL {
            let c = counts.get(&u).copied().unwrap_or(0);
            rows.push(vec![
                kind.to_string(),
                group.to_string(),
                u.as_str().to_string(),
                c.to_string(),
                format!("{:.6}", if total == 0 { 0.0 } else { c as f64 / total as f64 }),
            ]);
        }
    };
    for (v, counts) in &stats.by_variant {
        push("variant", v.as_str(), counts);
    }
    for (q, counts) in &stats.by_query {
        push("query", q, counts);
    }
    write_rows(path, &["group_kind", "group", "usefulness", "count", "fraction"], rows)
}

/// `histograms.csv`: `histogram,condition,bin_lower,bin_upper,count`.
pub fn write_histograms_csv(path: &Path, rows: &[HistogramRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    if rows.is_empty() {
        w.write_record(["histogram", "condition", "bin_lower", "bin_upper", "count"])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| EvalError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{EvidenceAnnotation, ServedEvidence};
    use crate::evidence::Origin;
    use crate::labeler::ConditionSet;
    use chrono::DateTime;
    use proptest::prelude::*;

    fn brute_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(auroc(&[], &[]), None);
    }

    #[test]
    fn auroc_near_half_for_independent_labels() {
        use crate::keyed::keyed_rng;
        use rand::Rng;
        let mut rng = keyed_rng(0, "test", "auroc");
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.random()).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.05, "{a}");
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force(
            data in prop::collection::vec((0u8..6, any::<bool>()), 0..20),
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assert_eq!(auroc(&scores, &labels), brute_auroc(&scores, &labels));
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..30),
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auroc(&scores, &labels), auroc(&transformed, &labels));
        }
    }

    #[test]
    fn prf1_cases() {
        let all = prf1(&[0.9, 0.1, 0.8], &[true, false, true], 0.5);
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
        let none = prf1(&[0.1, 0.2], &[true, false], 0.5);
        assert_eq!(none.recall, 0.0);
        assert!(none.precision_undefined);
        assert_eq!(none.f1, 0.0);
        // tp=1, fp=1, fn=1 -> p=0.5, r=0.5
        let half = prf1(&[0.9, 0.9, 0.1, 0.1], &[true, false, true, false], 0.5);
        assert_eq!((half.precision, half.recall), (0.5, 0.5));
        assert!((half.f1 - 0.5).abs() < 1e-12);
        let zero = prf1(&[0.01, 0.3], &[true, false], 0.0);
        assert_eq!(zero.recall, 1.0);
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(fleiss_kappa(&[vec![4, 0], vec![0, 4], vec![4, 0]]).unwrap(), 1.0);
        assert_eq!(fleiss_kappa(&[vec![3, 0], vec![3, 0]]).unwrap(), 1.0);
        // each item split 1/1: observed agreement 0, expected 0.5 -> -1
        assert_eq!(fleiss_kappa(&[vec![1, 1], vec![1, 1]]).unwrap(), -1.0);
        // observed equals expected -> 0
        let k = fleiss_kappa(&[vec![2, 0], vec![0, 2], vec![1, 1], vec![1, 1]]).unwrap();
        assert!(k.abs() < 1e-12, "{k}");
        assert!(fleiss_kappa(&[vec![2, 1], vec![1, 1]]).is_err());
        assert!(fleiss_kappa(&[vec![1, 0]]).is_err());
        assert!(fleiss_kappa(&[]).is_err());
    }

    fn example(features: Vec<Vec<f64>>, labels: Vec<bool>) -> Example {
        use crate::evidence::EvidenceSnippet;
        let snippets = (0..features.len())
            .map(|j| EvidenceSnippet {
                query: None,
                report_id: format!("r{j}"),
                relative_day: -(j as i64),
                text: format!("s{j}"),
                confidence: None,
                origin: Origin::RawSentence,
            })
            .collect();
        Example::new("e", snippets, features, labels).unwrap()
    }

    fn model() -> RiskModel {
        let c = ConditionSet::new(vec!["a".into()]).unwrap();
        RiskModel::new(c, 1, vec![0.5], "t").unwrap().with_weights(vec![vec![1.0]]).unwrap()
    }

    #[test]
    fn ablation_k_zero_is_prior_and_large_k_is_full() {
        let m = model();
        let examples = vec![
            example(vec![vec![2.0], vec![-0.5]], vec![true]),
            example(vec![vec![-1.0]], vec![false]),
            example(vec![], vec![false]),
            example(vec![vec![0.3], vec![0.1], vec![0.2]], vec![true]),
        ];
        let ab = evidence_count_ablation(&m, &examples, &[0, 1, 3, 100], 0.5, 0).unwrap();
        assert_eq!(ab[&0].macro_avg.auroc, Some(0.5));
        let full = metric_report(&m, &examples, 0.5, 0).unwrap();
        assert_eq!(ab[&3], full);
        assert_eq!(ab[&100], full);
        // k = 1 keeps the largest |vote|: 2.0, -1.0, none, 0.3
        let top1 = vec![
            example(vec![vec![2.0]], vec![true]),
            example(vec![vec![-1.0]], vec![false]),
            example(vec![], vec![false]),
            example(vec![vec![0.3]], vec![true]),
        ];
        assert_eq!(ab[&1], metric_report(&m, &top1, 0.5, 0).unwrap());
    }

    #[test]
    fn multi_seed_requires_two_and_constant_has_zero_stddev() {
        let m = model();
        let examples = vec![example(vec![vec![1.0]], vec![true]), example(vec![vec![-1.0]], vec![false])];
        assert!(matches!(
            multi_seed_eval(&[0], |s| metric_report(&m, &examples, 0.5, s)),
            Err(EvalError::TooFewSeeds(1))
        ));
        let s = multi_seed_eval(&[0, 1, 2], |s| metric_report(&m, &examples, 0.5, s)).unwrap();
        assert_eq!(s.mean["macro.auroc"].stddev, 0.0);
        assert_eq!(s.mean["macro.auroc"].mean, 1.0);
    }

    fn session(annotator: &str, useful: &[bool], dup: &[bool]) -> AnnotationSession {
        let t = DateTime::from_timestamp(0, 0).unwrap();
        let mut s = AnnotationSession::new(
            format!("s-{annotator}"),
            annotator.into(),
            "p".into(),
            ModelVariant::LlmLogodds,
            vec!["a".into()],
            t,
            None,
            3,
            useful.len(),
        );
        for (i, (&u, &d)) in useful.iter().zip(dup).enumerate() {
            s.served.push(ServedEvidence {
                rank: i + 1,
                report_id: "r".into(),
                query: Some("q".into()),
                text: "x".into(),
                relative_day: 0,
                origin: Origin::Llm,
                duplicate_of: d.then_some(1),
            });
            let level = if u { Usefulness::Useful } else { Usefulness::NotRelevant };
            s.annotations.push(EvidenceAnnotation {
                rank: i + 1,
                usefulness: BTreeMap::from([("a".to_string(), level)]),
                intuitive: if u { BTreeMap::from([("a".to_string(), true)]) } else { BTreeMap::new() },
                seen_in_review: u.then_some(true),
            });
        }
        s
    }

    #[test]
    fn usefulness_is_macro_over_annotators() {
        let one = annotation_stats(&[session("x", &[true, true, false, false], &[false; 4])], false);
        assert_eq!(one.percent_useful, Some(50.0));
        let a = session("x", &[true, false], &[false; 2]); // 50%
        let b = session("y", &[true, true, true, false, false, false, false, false, false, false], &[false; 10]); // 30%
        let two = annotation_stats(&[a, b], false);
        assert!((two.percent_useful.unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(two.evidence, 12);
        assert_eq!(two.instances, 2);
        assert_eq!(two.reports, 6);
    }

    #[test]
    fn duplicates_excluded_when_flagged() {
        let s = session("x", &[true, true, false], &[false, true, false]);
        assert_eq!(annotation_stats(std::slice::from_ref(&s), false).evidence, 3);
        let ex = annotation_stats(&[s], true);
        assert_eq!(ex.evidence, 2);
        assert_eq!(ex.percent_useful, Some(50.0));
    }

    #[test]
    fn csv_outputs_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let examples = vec![example(vec![vec![1.0]], vec![true]), example(vec![vec![-1.0]], vec![false])];
        let r = metric_report(&m, &examples, 0.5, 0).unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &[r], None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("seed,condition,auroc,precision,recall,f1,n_examples\n0,macro,1.000000"));
        let h = dir.path().join("histograms.csv");
        write_histograms_csv(&h, &histograms(&m, &examples, 4).unwrap()).unwrap();
        assert!(std::fs::read_to_string(&h).unwrap().starts_with("histogram,condition,bin_lower,bin_upper,count\n"));
    }
}
