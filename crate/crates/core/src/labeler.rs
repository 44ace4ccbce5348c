//! Confident-diagnosis label extraction from future reports.
//!
//! Each future report goes through three prompts: a binary gate asking
//! whether the report holds a confident diagnosis, a step-by-step reasoning
//! prompt, and a list prompt that sees only the reasoning output. The
//! resulting terms are normalized onto the closed condition set, first by
//! string heuristics and then by embedding similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{strip_admitting_diagnosis, LabelSets, Report};
use crate::embedder::{cosine, EmbedError, Embedder};
use crate::llm::{self, parse_binary, prompts, Backend, GatewayError};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.85;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("empty diagnosis reasoning for report `{0}`")]
    EmptyReasoning(String),
    #[error("invalid condition set: {0}")]
    Conditions(String),
    #[error("alias `{alias}` points at unknown condition `{target}`")]
    Alias { alias: String, target: String },
    #[error("labels file {path}: {message}")]
    File { path: String, message: String },
}

/// Ordered, unique, lowercase condition names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ConditionSet(Vec<String>);

impl ConditionSet {
    pub fn new(conditions: Vec<String>) -> Result<Self, LabelError> {
        if conditions.is_empty() {
            return Err(LabelError::Conditions("empty".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &conditions {
            if c.trim().is_empty() || *c != c.to_lowercase() || c.trim() != c {
                return Err(LabelError::Conditions(format!("`{c}` must be trimmed lowercase")));
            }
            if !seen.insert(c) {
                return Err(LabelError::Conditions(format!("duplicate `{c}`")));
            }
        }
        Ok(ConditionSet(conditions))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, condition: &str) -> Option<usize> {
        self.0.iter().position(|c| c == condition)
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }
}

impl Default for ConditionSet {
    fn default() -> Self {
        ConditionSet(vec!["cancer".into(), "pneumonia".into(), "pulmonary edema".into()])
    }
}

impl TryFrom<Vec<String>> for ConditionSet {
    type Error = LabelError;

    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        ConditionSet::new(v)
    }
}

impl From<ConditionSet> for Vec<String> {
    fn from(c: ConditionSet) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisLabel {
    pub patient_id: String,
    pub condition: String,
    /// Future report in which the condition was first extracted.
    pub report_id: String,
    /// Terms from the list prompt that normalized to `condition`.
    pub raw_terms: Vec<String>,
}

pub fn default_aliases() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("congestive heart failure".to_string(), "pulmonary edema".to_string()),
        ("chf".to_string(), "pulmonary edema".to_string()),
    ])
}

pub fn has_confident_diagnosis(report: &Report, gateway: &dyn Backend) -> Result<bool, LabelError> {
    let cleaned = strip_admitting_diagnosis(report);
    let prompt = llm::render(&prompts::confident_diagnosis_gate(), &cleaned.text, None)?;
    Ok(parse_binary(&gateway.complete(&prompt)?.text))
}

/// Returns the reasoning completion verbatim.
pub fn extract_diagnosis_text(report: &Report, gateway: &dyn Backend) -> Result<String, LabelError> {
    let cleaned = strip_admitting_diagnosis(report);
    let prompt = llm::render(&prompts::diagnosis_reasoning(), &cleaned.text, None)?;
    let completion = gateway.complete(&prompt)?;
    if completion.text.trim().is_empty() {
        return Err(LabelError::EmptyReasoning(report.report_id.clone()));
    }
    Ok(completion.text)
}

/// Splits a list completion on newlines, commas and semicolons, dropping list
/// markers (`-`, `*`, `•`, `1.`, `1)`). "none" yields an empty list.
pub fn parse_term_list(completion: &str) -> Vec<String> {
    if completion.trim().trim_end_matches('.').eq_ignore_ascii_case("none") {
        return Vec::new();
    }
    completion
        .split(['\n', ',', ';'])
        .map(strip_list_marker)
        .map(|t| t.trim().trim_end_matches('.').trim().to_string())
        .filter(|t| !t.is_empty() && !t.eq_ignore_ascii_case("none"))
        .collect()
}

fn strip_list_marker(item: &str) -> &str {
    let item = item.trim_start();
    if let Some(rest) = item.strip_prefix(['-', '*', '•']) {
        return rest;
    }
    let digits = item.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = item[digits..].strip_prefix(['.', ')']) {
            return rest;
        }
    }
    item
}

pub fn list_diagnostic_terms(diagnosis_text: &str, gateway: &dyn Backend) -> Result<Vec<String>, LabelError> {
    let prompt = llm::render(&prompts::diagnostic_terms(), diagnosis_text, None)?;
    let completion = gateway.complete(&prompt)?;
    let terms = parse_term_list(&completion.text);
    if terms.is_empty() && !completion.text.trim().trim_end_matches('.').eq_ignore_ascii_case("none") {
        log::warn!("no diagnostic terms parsed from {:?}", completion.text);
    }
    Ok(terms)
}

/// Two-step normalization of free-text terms onto a [`ConditionSet`].
pub struct Normalizer {
    targets: ConditionSet,
    aliases: BTreeMap<String, String>,
    threshold: f64,
    embedder: Arc<dyn Embedder>,
    target_vectors: Vec<Vec<f64>>,
}

impl Normalizer {
    pub fn new(targets: ConditionSet, embedder: Arc<dyn Embedder>) -> Result<Self, LabelError> {
        let target_vectors = targets.iter().map(|t| embedder.embed(t)).collect::<Result<_, _>>()?;
        Ok(Normalizer {
            targets,
            aliases: default_aliases(),
            threshold: DEFAULT_SIMILARITY_THRESHOLD,
            embedder,
            target_vectors,
        })
    }

    pub fn with_aliases(mut self, aliases: BTreeMap<String, String>) -> Result<Self, LabelError> {
        let mut lowered = BTreeMap::new();
        for (alias, target) in aliases {
            if self.targets.index_of(&target).is_none() {
                return Err(LabelError::Alias { alias, target });
            }
            lowered.insert(alias.trim().to_lowercase(), target);
        }
        self.aliases = lowered;
        Ok(self)
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn targets(&self) -> &ConditionSet {
        &self.targets
    }

    /// String heuristics only: exact match, alias table, then containment of
    /// a target (longest first).
    pub fn match_heuristic(&self, term: &str) -> Option<String> {
        let lowered = term.trim().to_lowercase();
        if let Some(t) = self.targets.iter().find(|t| **t == lowered) {
            return Some(t.clone());
        }
        if let Some(t) = self.aliases.get(&lowered) {
            return Some(t.clone());
        }
        self.targets
            .iter()
            .filter(|t| lowered.contains(t.as_str()))
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
            .cloned()
    }

    /// Best target by cosine similarity, if strictly above the threshold.
    pub fn match_embedding(&self, term: &str) -> Result<Option<String>, LabelError> {
        let v = self.embedder.embed(term)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, tv) in self.target_vectors.iter().enumerate() {
            let sim = match cosine(&v, tv) {
                Ok(s) => s,
                Err(EmbedError::ZeroVector) => continue,
                Err(e) => return Err(e.into()),
            };
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        Ok(best
            .filter(|(_, sim)| *sim > self.threshold)
            .map(|(i, _)| self.targets.as_slice()[i].clone()))
    }

    pub fn normalize(&self, term: &str) -> Result<Option<String>, LabelError> {
        if term.trim().is_empty() {
            return Ok(None);
        }
        match self.match_heuristic(term) {
            Some(hit) => Ok(Some(hit)),
            None => self.match_embedding(term),
        }
    }
}

/// Runs the three prompts on one report and normalizes the result.
/// Returns condition → raw terms that mapped to it.
pub fn conditions_in_report(
    report: &Report,
    normalizer: &Normalizer,
    gateway: &dyn Backend,
) -> Result<BTreeMap<String, Vec<String>>, LabelError> {
    let mut found: BTreeMap<String, Vec<String>> = BTreeMap::new();
    if !has_confident_diagnosis(report, gateway)? {
        return Ok(found);
    }
    let reasoning = extract_diagnosis_text(report, gateway)?;
    for term in list_diagnostic_terms(&reasoning, gateway)? {
        if let Some(condition) = normalizer.normalize(&term)? {
            found.entry(condition).or_default().push(term);
        }
    }
    Ok(found)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatientLabels {
    pub labels: Vec<DiagnosisLabel>,
    /// Reports whose chain failed, with the error message.
    pub skipped: Vec<(String, String)>,
}

/// One label per condition, at the earliest future report yielding it.
pub fn label_patient(
    patient_id: &str,
    future: &[Report],
    normalizer: &Normalizer,
    gateway: &dyn Backend,
) -> PatientLabels {
    let mut out = PatientLabels::default();
    for report in future {
        if out.labels.len() == normalizer.targets().len() {
            break;
        }
        match conditions_in_report(report, normalizer, gateway) {
            Ok(found) => {
                // report conditions in condition-set order
                for condition in normalizer.targets().iter() {
                    let Some(terms) = found.get(condition) else { continue };
                    if out.labels.iter().any(|l| &l.condition == condition) {
                        continue;
                    }
                    out.labels.push(DiagnosisLabel {
                        patient_id: patient_id.to_string(),
                        condition: condition.clone(),
                        report_id: report.report_id.clone(),
                        raw_terms: terms.clone(),
                    });
                }
            }
            Err(e) => {
                log::warn!("patient {patient_id}, report {}: {e}; skipped", report.report_id);
                out.skipped.push((report.report_id.clone(), e.to_string()));
            }
        }
    }
    out
}

pub fn label_sets(labels: &[DiagnosisLabel]) -> LabelSets {
    let mut sets = LabelSets::new();
    for l in labels {
        sets.entry(l.patient_id.clone()).or_default().insert(l.condition.clone());
    }
    sets
}

pub fn write_labels(path: &Path, labels: &[DiagnosisLabel]) -> Result<(), LabelError> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serde_json::to_string(l).expect("label serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| LabelError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<DiagnosisLabel>, LabelError> {
    let file_err = |message: String| LabelError::File {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| file_err(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CharSpan;
    use crate::embedder::HashingEmbedder;
    use crate::llm::{FixtureRule, MockBackend, Recording};

    fn report(id: &str, text: &str) -> Report {
        Report {
            patient_id: "p".into(),
            report_id: id.into(),
            date: "2100-01-01".parse().unwrap(),
            report_type: "discharge summary".into(),
            text: text.into(),
            admitting_diagnosis_span: None,
        }
    }

    fn normalizer() -> Normalizer {
        Normalizer::new(ConditionSet::default(), Arc::new(HashingEmbedder::similarity())).unwrap()
    }

    #[test]
    fn condition_set_validation() {
        assert!(ConditionSet::new(vec![]).is_err());
        assert!(ConditionSet::new(vec!["Cancer".into()]).is_err());
        assert!(ConditionSet::new(vec!["a".into(), "a".into()]).is_err());
        let parsed: ConditionSet = serde_json::from_str(r#"["cancer","sepsis"]"#).unwrap();
        assert_eq!(parsed.index_of("sepsis"), Some(1));
        assert!(serde_json::from_str::<ConditionSet>(r#"["X"]"#).is_err());
    }

    #[test]
    fn gate_examples() {
        let r = report("r", "Final diagnosis: pneumonia.");
        let yes = MockBackend::new(vec![FixtureRule::substring("confident diagnosis", "Yes")]);
        assert!(has_confident_diagnosis(&r, &yes).unwrap());
        assert!(!has_confident_diagnosis(&r, &MockBackend::new(vec![])).unwrap());
    }

    #[test]
    fn admitting_diagnosis_never_reaches_the_prompt() {
        let mut r = report("r", "Admitting Diagnosis: pneumonia\nLungs are clear.");
        r.admitting_diagnosis_span = Some(CharSpan(0, 31));
        let mock = Recording::new(MockBackend::new(vec![FixtureRule::substring("confident", "Yes")]));
        has_confident_diagnosis(&r, &mock).unwrap();
        extract_diagnosis_text(&r, &mock).unwrap();
        for p in mock.prompts() {
            assert!(!p.contains("Admitting Diagnosis"), "{p}");
            assert!(p.contains("Lungs are clear."));
        }
    }

    #[test]
    fn reasoning_passthrough_and_blank_error() {
        let r = report("r", "text");
        let m = MockBackend::new(vec![FixtureRule::substring(
            "correct diagnosis",
            "The patient was found to have pneumonia...",
        )]);
        assert_eq!(extract_diagnosis_text(&r, &m).unwrap(), "The patient was found to have pneumonia...");
        let blank = MockBackend::new(vec![FixtureRule::substring("correct diagnosis", "  \n")]);
        assert!(matches!(extract_diagnosis_text(&r, &blank), Err(LabelError::EmptyReasoning(_))));
    }

    #[test]
    fn term_list_parsing() {
        assert_eq!(parse_term_list("pneumonia, sepsis"), vec!["pneumonia", "sepsis"]);
        assert!(parse_term_list("None").is_empty());
        assert!(parse_term_list(" none. ").is_empty());
        assert_eq!(parse_term_list("- CHF\n- pulmonary edema"), vec!["CHF", "pulmonary edema"]);
        assert_eq!(
            parse_term_list("1. lung cancer\n2) pleural effusion; • sepsis."),
            vec!["lung cancer", "pleural effusion", "sepsis"]
        );
        assert!(parse_term_list(" \n - \n").is_empty());
    }

    #[test]
    fn list_prompt_sees_only_reasoning() {
        let mock = Recording::new(MockBackend::new(vec![FixtureRule::substring("diagnostic terms", "pneumonia")]));
        let terms = list_diagnostic_terms("REASONING TEXT", &mock).unwrap();
        assert_eq!(terms, vec!["pneumonia"]);
        assert_eq!(
            mock.prompts()[0],
            "Here is a diagnosis of a patient:\n\nREASONING TEXT\n\nQuestion: Provide a list of diagnostic terms or write none.\nAnswer:"
        );
    }

    #[test]
    fn normalization_examples() {
        let n = normalizer();
        assert_eq!(n.normalize("Pneumonia").unwrap().as_deref(), Some("pneumonia"));
        assert_eq!(n.normalize("lung cancer").unwrap().as_deref(), Some("cancer"));
        assert_eq!(n.normalize("CHF").unwrap().as_deref(), Some("pulmonary edema"));
        assert_eq!(n.normalize("Congestive Heart Failure").unwrap().as_deref(), Some("pulmonary edema"));
        assert_eq!(n.normalize("fracture").unwrap(), None);
        assert_eq!(n.normalize("  ").unwrap(), None);
    }

    #[test]
    fn fracture_is_far_from_every_target_under_reference_embedder() {
        let e = HashingEmbedder::similarity();
        let f = e.embed("fracture").unwrap();
        for t in ConditionSet::default().iter() {
            let sim = cosine(&f, &e.embed(t).unwrap()).unwrap();
            assert!(sim < 0.85, "{t}: {sim}");
        }
    }

    #[test]
    fn aliases_must_target_known_conditions() {
        let bad = BTreeMap::from([("x".to_string(), "sepsis".to_string())]);
        assert!(normalizer().with_aliases(bad).is_err());
    }

    fn chain_mock() -> MockBackend {
        MockBackend::new(vec![
            FixtureRule::substring("Is there a confident diagnosis", "Yes").with_also(["PNA"]),
            FixtureRule::substring("Is there a confident diagnosis", "Yes").with_also(["heart failure"]),
            FixtureRule::substring("What is the correct diagnosis", "Dx is pneumonia.").with_also(["PNA"]),
            FixtureRule::substring("What is the correct diagnosis", "Dx is CHF.").with_also(["heart failure"]),
            FixtureRule::substring("Dx is pneumonia.", "pneumonia").with_also(["Provide a list"]),
            FixtureRule::substring("Dx is CHF.", "- CHF").with_also(["Provide a list"]),
        ])
    }

    #[test]
    fn earliest_report_wins() {
        let future = vec![
            report("f1", "Stable."),
            report("f2", "PNA confirmed."),
            report("f3", "PNA again."),
        ];
        let out = label_patient("p", &future, &normalizer(), &chain_mock());
        assert_eq!(out.labels.len(), 1);
        assert_eq!(out.labels[0].report_id, "f2");
        assert_eq!(out.labels[0].condition, "pneumonia");
        assert_eq!(out.labels[0].raw_terms, vec!["pneumonia"]);
    }

    #[test]
    fn no_targets_no_labels_and_alias_labels() {
        let quiet = vec![report("f1", "Stable."), report("f2", "Fine.")];
        assert!(label_patient("p", &quiet, &normalizer(), &chain_mock()).labels.is_empty());

        let chf = vec![report("f1", "Known heart failure.")];
        let out = label_patient("p", &chf, &normalizer(), &chain_mock());
        assert_eq!(out.labels[0].condition, "pulmonary edema");
        assert_eq!(out.labels[0].raw_terms, vec!["CHF"]);
    }

    #[test]
    fn failing_report_is_skipped() {
        let mock = MockBackend::new(vec![
            FixtureRule::substring("Is there a confident diagnosis", "Yes"),
            FixtureRule::substring("What is the correct diagnosis", " ").with_also(["BROKEN"]),
            FixtureRule::substring("What is the correct diagnosis", "Dx is pneumonia."),
            FixtureRule::substring("Dx is pneumonia.", "pneumonia").with_also(["Provide a list"]),
        ]);
        let future = vec![report("f1", "BROKEN"), report("f2", "ok")];
        let out = label_patient("p", &future, &normalizer(), &mock);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, "f1");
        assert_eq!(out.labels[0].report_id, "f2");
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let labels = vec![DiagnosisLabel {
            patient_id: "p".into(),
            condition: "cancer".into(),
            report_id: "r".into(),
            raw_terms: vec!["lung cancer".into()],
        }];
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
        assert_eq!(label_sets(&labels)["p"], BTreeSet::from(["cancer".to_string()]));
    }
}
