//! End-to-end glue: split, retrieve, label, encode, train and evaluate.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::{
    assign_splits, filter_long_records, split_timeline, subsample_by, Corpus, CorpusError, LabelSets,
    PatientTimeline, SplitAssignment, SplitFractions, SplitName,
};
use crate::embedder::Embedder;
use crate::eval::{metric_report, MetricReport, DEFAULT_THRESHOLD};
use crate::evidence::{all_ehr_evidence, format_for_model, retrieve_all, EvidenceSnippet, PatientEvidence, Query};
use crate::labeler::{label_patient, label_sets, ConditionSet, DiagnosisLabel, Normalizer};
use crate::llm::Backend;
use crate::nam::{train, CheckpointRecord, Example, RiskModel, TrainConfig};
use crate::Error;

pub const DEFAULT_NEGATIVE_RATE: f64 = 0.2;
pub const DEFAULT_MAX_REPORTS: usize = 200;

/// Where evidence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceSource {
    /// Gate/extract prompts over every (past report, query) pair.
    Llm,
    /// The last `limit` raw sentences of the past record.
    AllEhr { limit: usize },
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub conditions: ConditionSet,
    pub queries: Vec<Query>,
    pub fractions: SplitFractions,
    pub negative_rate: f64,
    pub max_reports: usize,
    pub train: TrainConfig,
    pub threshold: f64,
    pub evidence: EvidenceSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            conditions: ConditionSet::default(),
            queries: crate::evidence::default_queries(),
            fractions: SplitFractions::default(),
            negative_rate: DEFAULT_NEGATIVE_RATE,
            max_reports: DEFAULT_MAX_REPORTS,
            train: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            evidence: EvidenceSource::Llm,
        }
    }
}

/// Splits every timeline at a seeded point, dropping over-long records and
/// patients too short to split.
pub fn split_corpus(corpus: &Corpus, max_reports: usize, seed: u64) -> Corpus {
    let filtered = filter_long_records(corpus, max_reports);
    let patients = filtered
        .patients
        .iter()
        .filter_map(|p| match split_timeline(p, seed) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("{e}; patient skipped");
                None
            }
        })
        .collect();
    Corpus { patients }
}

/// Labels from each patient's future reports.
pub fn label_timelines(
    timelines: &[PatientTimeline],
    normalizer: &Normalizer,
    gateway: &dyn Backend,
) -> Vec<DiagnosisLabel> {
    timelines
        .par_iter()
        .map(|t| label_patient(&t.patient_id, t.future(), normalizer, gateway).labels)
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub fn gather_evidence(
    timelines: &[PatientTimeline],
    queries: &[Query],
    source: EvidenceSource,
    gateway: &dyn Backend,
) -> Result<Vec<PatientEvidence>, Error> {
    timelines
        .iter()
        .map(|t| {
            let snippets = match source {
                EvidenceSource::Llm => retrieve_all(t, queries, gateway)?,
                EvidenceSource::AllEhr { limit } => all_ehr_evidence(t, limit),
            };
            Ok(PatientEvidence {
                patient_id: t.patient_id.clone(),
                split_index: t.split_index,
                snippets,
            })
        })
        .collect()
}

/// Feature vectors of the formatted snippets.
pub fn encode(snippets: &[EvidenceSnippet], embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>, Error> {
    let texts: Vec<String> = snippets.iter().map(format_for_model).collect();
    Ok(embedder.embed_batch(&texts)?)
}

pub fn build_examples(
    evidence: &[PatientEvidence],
    labels: &LabelSets,
    conditions: &ConditionSet,
    embedder: &dyn Embedder,
) -> Result<Vec<Example>, Error> {
    evidence
        .iter()
        .map(|pe| {
            let positives = labels.get(&pe.patient_id);
            let y = conditions
                .iter()
                .map(|c| positives.is_some_and(|s| s.contains(c)))
                .collect();
            let features = encode(&pe.snippets, embedder)?;
            Ok(Example::new(pe.patient_id.clone(), pe.snippets.clone(), features, y)?)
        })
        .collect()
}

/// Everything produced by one seeded run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub splits: SplitAssignment,
    pub labels: Vec<DiagnosisLabel>,
    pub model: RiskModel,
    pub history: Vec<CheckpointRecord>,
    pub best: usize,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub validation_report: MetricReport,
    pub test_report: Option<MetricReport>,
}

/// Re-splits timelines and patients with `seed`, extracts labels and
/// evidence, subsamples training negatives, trains and evaluates.
pub fn run_seed(
    corpus: &Corpus,
    gateway: &dyn Backend,
    embedder: &dyn Embedder,
    normalizer: &Normalizer,
    config: &PipelineConfig,
    seed: u64,
) -> Result<SeedRun, Error> {
    let split = split_corpus(corpus, config.max_reports, seed);
    if split.patients.is_empty() {
        return Err(CorpusError::Empty.into());
    }
    let splits = assign_splits(&split, config.fractions, seed)?;
    let labels = label_timelines(&split.patients, normalizer, gateway);
    let sets = label_sets(&labels);

    let mut examples: BTreeMap<SplitName, Vec<Example>> = BTreeMap::new();
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        let timelines = split.subset(splits.ids(name));
        let timelines = if name == SplitName::Train {
            subsample_by(
                timelines,
                |t| t.patient_id.as_str(),
                |t| sets.get(&t.patient_id).is_some_and(|s| !s.is_empty()),
                config.negative_rate,
                seed,
            )?
        } else {
            timelines
        };
        let evidence = gather_evidence(&timelines, &config.queries, config.evidence, gateway)?;
        examples.insert(name, build_examples(&evidence, &sets, &config.conditions, embedder)?);
    }
    let train_set = examples.remove(&SplitName::Train).unwrap_or_default();
    let validation = examples.remove(&SplitName::Validation).unwrap_or_default();
    let test = examples.remove(&SplitName::Test).unwrap_or_default();

    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = train(
        &train_set,
        &validation,
        &config.conditions,
        embedder.dimension(),
        embedder.id(),
        &train_config,
    )?;
    let validation_report = metric_report(&outcome.model, &validation, config.threshold, seed)?;
    let test_report = if test.is_empty() {
        None
    } else {
        Some(metric_report(&outcome.model, &test, config.threshold, seed)?)
    };
    Ok(SeedRun {
        seed,
        splits,
        labels,
        model: outcome.model,
        history: outcome.history,
        best: outcome.best,
        train: train_set,
        validation,
        test,
        validation_report,
        test_report,
    })
}
