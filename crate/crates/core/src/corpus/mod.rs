//! Patient-note corpora: loading, validation and preprocessing.
//!
//! A corpus file is JSON Lines with one report per line:
//!
//! ```text
//! {"patient_id":"p1","report_id":"p1-r001","date":"2101-03-04","report_type":"radiology","text":"...","admitting_diagnosis_span":[0,31]}
//! ```
//!
//! Reports are grouped into [`PatientTimeline`]s sorted by `(date, report_id)`.
//! Each timeline carries a split index separating the "past" (visible to the
//! model and the annotator) from the "future" (used only for label extraction).

mod split;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyed::keyed_rng;

pub use split::{assign_splits, SplitAssignment, SplitFractions, SplitName};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate report_id `{0}`")]
    DuplicateReport(String),
    #[error("corpus is empty")]
    Empty,
    #[error("patient `{patient_id}` has {count} report(s); at least 2 are needed to split")]
    TooShortToSplit { patient_id: String, count: usize },
    #[error("rate must lie in (0, 1], got {0}")]
    InvalidRate(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split assignment: {0}")]
    InvalidSplits(String),
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Half-open character range `[start, end)` into a report's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan(pub usize, pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub patient_id: String,
    pub report_id: String,
    pub date: NaiveDate,
    pub report_type: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admitting_diagnosis_span: Option<CharSpan>,
}

impl Report {
    fn validate(&self) -> Result<(), String> {
        if self.report_id.trim().is_empty() {
            return Err("empty report_id".into());
        }
        if self.patient_id.trim().is_empty() {
            return Err("empty patient_id".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("report `{}` has empty text", self.report_id));
        }
        if let Some(CharSpan(start, end)) = self.admitting_diagnosis_span {
            let len = self.text.chars().count();
            if start > end || end > len {
                return Err(format!(
                    "admitting_diagnosis_span [{start},{end}) outside text of {len} chars in report `{}`",
                    self.report_id
                ));
            }
        }
        Ok(())
    }
}

/// Returns a copy of `report` with its admitting-diagnosis span excised.
pub fn strip_admitting_diagnosis(report: &Report) -> Report {
    let mut out = report.clone();
    if let Some(CharSpan(start, end)) = report.admitting_diagnosis_span {
        let byte_at = |char_idx: usize| {
            report
                .text
                .char_indices()
                .nth(char_idx)
                .map(|(b, _)| b)
                .unwrap_or(report.text.len())
        };
        let (from, to) = (byte_at(start), byte_at(end));
        out.text = format!("{}{}", &report.text[..from], &report.text[to..]);
        out.admitting_diagnosis_span = None;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub reports: Vec<Report>,
    pub split_index: usize,
}

impl PatientTimeline {
    /// Builds a timeline with every report in the past.
    pub fn new(patient_id: impl Into<String>, mut reports: Vec<Report>) -> Self {
        reports.sort_by(|a, b| (a.date, &a.report_id).cmp(&(b.date, &b.report_id)));
        let split_index = reports.len();
        PatientTimeline {
            patient_id: patient_id.into(),
            reports,
            split_index,
        }
    }

    pub fn past(&self) -> &[Report] {
        &self.reports[..self.split_index]
    }

    pub fn future(&self) -> &[Report] {
        &self.reports[self.split_index..]
    }

    /// Day 0 for relative dating: the date of the last past report.
    pub fn anchor_date(&self) -> NaiveDate {
        self.reports[self.split_index - 1].date
    }

    pub fn relative_day(&self, report: &Report) -> i64 {
        (report.date - self.anchor_date()).num_days()
    }

    pub fn with_split_index(mut self, split_index: usize) -> Self {
        assert!(
            (1..=self.reports.len()).contains(&split_index),
            "split index {split_index} outside [1, {}]",
            self.reports.len()
        );
        self.split_index = split_index;
        self
    }
}

/// Draws the past/future split point uniformly from `[1, len - 1]`.
pub fn split_timeline(patient: &PatientTimeline, seed: u64) -> Result<PatientTimeline, CorpusError> {
    let n = patient.reports.len();
    if n < 2 {
        return Err(CorpusError::TooShortToSplit {
            patient_id: patient.patient_id.clone(),
            count: n,
        });
    }
    let mut rng = keyed_rng(seed, "split_timeline", &patient.patient_id);
    let split_index = rng.random_range(1..n);
    Ok(patient.clone().with_split_index(split_index))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub patients: Vec<PatientTimeline>,
}

impl Corpus {
    /// Groups reports by patient (first-appearance order) and sorts each timeline.
    pub fn from_reports(reports: Vec<Report>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for r in &reports {
            if !seen.insert(r.report_id.clone()) {
                return Err(CorpusError::DuplicateReport(r.report_id.clone()));
            }
        }
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<Report>> = HashMap::new();
        for r in reports {
            if !grouped.contains_key(&r.patient_id) {
                order.push(r.patient_id.clone());
            }
            grouped.entry(r.patient_id.clone()).or_default().push(r);
        }
        let patients = order
            .into_iter()
            .map(|pid| {
                let reports = grouped.remove(&pid).unwrap_or_default();
                PatientTimeline::new(pid, reports)
            })
            .collect();
        Ok(Corpus { patients })
    }

    pub fn parse_jsonl(input: &str) -> Result<Self, CorpusError> {
        let mut reports = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let report: Report = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            report
                .validate()
                .map_err(|message| CorpusError::Parse { line: line_no, message })?;
            reports.push(report);
        }
        if reports.is_empty() {
            return Err(CorpusError::Empty);
        }
        Corpus::from_reports(reports)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for report in self.patients.iter().flat_map(|p| &p.reports) {
            out.push_str(&serde_json::to_string(report).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn get(&self, patient_id: &str) -> Option<&PatientTimeline> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    /// Patients listed in `ids`, in corpus order.
    pub fn subset(&self, ids: &[String]) -> Vec<PatientTimeline> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.patients
            .iter()
            .filter(|p| wanted.contains(p.patient_id.as_str()))
            .cloned()
            .collect()
    }

    pub fn report_count(&self) -> usize {
        self.patients.iter().map(|p| p.reports.len()).sum()
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    Corpus::parse_jsonl(&text)
}

/// Drops patients with strictly more than `max_reports` reports.
pub fn filter_long_records(corpus: &Corpus, max_reports: usize) -> Corpus {
    Corpus {
        patients: corpus
            .patients
            .iter()
            .filter(|p| p.reports.len() <= max_reports)
            .cloned()
            .collect(),
    }
}

/// Keeps every item for which `is_positive` holds and each other item with
/// probability `rate`, decided by a stream keyed on `(seed, id)`.
pub fn subsample_by<T>(
    items: Vec<T>,
    id: impl Fn(&T) -> &str,
    is_positive: impl Fn(&T) -> bool,
    rate: f64,
    seed: u64,
) -> Result<Vec<T>, CorpusError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(CorpusError::InvalidRate(rate));
    }
    Ok(items
        .into_iter()
        .filter(|item| {
            is_positive(item) || keyed_rng(seed, "subsample_negatives", id(item)).random::<f64>() < rate
        })
        .collect())
}

/// Per-patient positive condition sets.
pub type LabelSets = BTreeMap<String, BTreeSet<String>>;

pub fn subsample_negatives(
    patients: Vec<PatientTimeline>,
    labels: &LabelSets,
    rate: f64,
    seed: u64,
) -> Result<Vec<PatientTimeline>, CorpusError> {
    subsample_by(
        patients,
        |p| p.patient_id.as_str(),
        |p| labels.get(&p.patient_id).is_some_and(|s| !s.is_empty()),
        rate,
        seed,
    )
}
