//! Evidence retrieval.
//!
//! For every (report, query) pair a binary gate prompt is issued; only when
//! it answers affirmatively is the extraction prompt issued, and its trimmed
//! completion becomes one snippet. The all-EHR baseline instead turns the
//! last sentences of the record into raw snippets.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PatientTimeline, Report};
use crate::llm::{self, length_normalized_logprob, parse_binary, prompts, Backend, GatewayError, PromptTemplate};

pub const DEFAULT_ALL_EHR_LIMIT: usize = 1000;

const DEFAULT_QUERIES: &str = include_str!("../data/default_queries.json");

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("report `{report_id}`, query `{query}`: {source}")]
    Gateway {
        report_id: String,
        query: String,
        #[source]
        source: GatewayError,
    },
    #[error("report `{report_id}`, query `{query}`: gate answered yes but extraction was empty")]
    EmptyExtraction { report_id: String, query: String },
    #[error("patient `{0}` has no past reports")]
    EmptyPast(String),
    #[error("query file: {0}")]
    Queries(String),
    #[error("evidence file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Risk,
    Signs,
    RiskFactor,
}

impl QueryKind {
    pub fn gate(self) -> PromptTemplate {
        match self {
            QueryKind::Risk => prompts::risk_gate(),
            QueryKind::Signs => prompts::signs_gate(),
            QueryKind::RiskFactor => prompts::risk_factor_gate(),
        }
    }

    pub fn extractor(self) -> PromptTemplate {
        match self {
            QueryKind::Risk => prompts::risk_extract(),
            QueryKind::Signs => prompts::signs_extract(),
            QueryKind::RiskFactor => prompts::risk_factor_extract(),
        }
    }

    /// Label used when formatting evidence for the model.
    pub fn label(self) -> &'static str {
        match self {
            QueryKind::Risk | QueryKind::Signs => "diagnosis",
            QueryKind::RiskFactor => "risk factor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Query {
    pub term: String,
    pub kind: QueryKind,
}

impl Query {
    pub fn new(term: impl Into<String>, kind: QueryKind) -> Self {
        Query { term: term.into(), kind }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({:?})", self.term, self.kind)
    }
}

/// The three diagnoses (risk and signs queries) followed by the clinician
/// risk-factor list.
pub fn default_queries() -> Vec<Query> {
    serde_json::from_str(DEFAULT_QUERIES).expect("bundled query file parses")
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>, EvidenceError> {
    let text = fs::read_to_string(path).map_err(|e| EvidenceError::Queries(format!("{}: {e}", path.display())))?;
    let queries: Vec<Query> =
        serde_json::from_str(&text).map_err(|e| EvidenceError::Queries(format!("{}: {e}", path.display())))?;
    if let Some(q) = queries.iter().find(|q| q.term.trim().is_empty()) {
        return Err(EvidenceError::Queries(format!("empty query term ({:?})", q.kind)));
    }
    Ok(queries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Llm,
    RawSentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnippet {
    /// `None` for raw sentences, which are not tied to a query.
    pub query: Option<Query>,
    pub report_id: String,
    pub relative_day: i64,
    pub text: String,
    #[serde(default)]
    pub confidence: Option<f64>,
    pub origin: Origin,
}

impl EvidenceSnippet {
    pub fn query_term(&self) -> &str {
        self.query.as_ref().map(|q| q.term.as_str()).unwrap_or("")
    }
}

fn gateway_err(report: &Report, query: &Query) -> impl FnOnce(GatewayError) -> EvidenceError {
    let report_id = report.report_id.clone();
    let query = query.term.clone();
    move |source| EvidenceError::Gateway {
        report_id,
        query,
        source,
    }
}

pub fn evidence_exists(report: &Report, query: &Query, gateway: &dyn Backend) -> Result<bool, EvidenceError> {
    let prompt = llm::render(&query.kind.gate(), &report.text, Some(&query.term)).map_err(gateway_err(report, query))?;
    let completion = gateway.complete(&prompt).map_err(gateway_err(report, query))?;
    Ok(parse_binary(&completion.text))
}

/// Issues the extraction prompt and returns the trimmed text with its
/// length-normalized log-probability, when the backend reports one.
fn extract(report: &Report, query: &Query, gateway: &dyn Backend) -> Result<(String, Option<f64>), EvidenceError> {
    let prompt =
        llm::render(&query.kind.extractor(), &report.text, Some(&query.term)).map_err(gateway_err(report, query))?;
    let completion = gateway.complete(&prompt).map_err(gateway_err(report, query))?;
    let text = completion.text.trim().to_string();
    if text.is_empty() {
        return Err(EvidenceError::EmptyExtraction {
            report_id: report.report_id.clone(),
            query: query.term.clone(),
        });
    }
    Ok((text, length_normalized_logprob(&completion).ok()))
}

pub fn get_evidence(report: &Report, query: &Query, gateway: &dyn Backend) -> Result<String, EvidenceError> {
    extract(report, query, gateway).map(|(text, _)| text)
}

/// At most one snippet per (report, query): `None` when the gate says no.
pub fn retrieve(
    report: &Report,
    relative_day: i64,
    query: &Query,
    gateway: &dyn Backend,
) -> Result<Option<EvidenceSnippet>, EvidenceError> {
    if !evidence_exists(report, query, gateway)? {
        return Ok(None);
    }
    let (text, confidence) = extract(report, query, gateway)?;
    Ok(Some(EvidenceSnippet {
        query: Some(query.clone()),
        report_id: report.report_id.clone(),
        relative_day,
        text,
        confidence,
        origin: Origin::Llm,
    }))
}

/// Retrieves over every (past report, query) pair. Calls may run in
/// parallel; the output is always ordered by (report position, query position).
pub fn retrieve_all(
    timeline: &PatientTimeline,
    queries: &[Query],
    gateway: &dyn Backend,
) -> Result<Vec<EvidenceSnippet>, EvidenceError> {
    let past = timeline.past();
    if past.is_empty() {
        return Err(EvidenceError::EmptyPast(timeline.patient_id.clone()));
    }
    let pairs: Vec<(&Report, &Query)> = past.iter().flat_map(|r| queries.iter().map(move |q| (r, q))).collect();
    let results: Vec<Result<Option<EvidenceSnippet>, EvidenceError>> = pairs
        .par_iter()
        .map(|(r, q)| retrieve(r, timeline.relative_day(r), q, gateway))
        .collect();
    let mut out = Vec::new();
    for r in results {
        if let Some(s) = r? {
            out.push(s);
        }
    }
    Ok(out)
}

fn escape_quoted(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Model input for one snippet: `<query> (<kind>): "<evidence>" (day <n>)`.
/// Raw sentences carry no query and render as `"<evidence>" (day <n>)`.
pub fn format_for_model(snippet: &EvidenceSnippet) -> String {
    let quoted = escape_quoted(&snippet.text);
    match &snippet.query {
        Some(q) => format!("{} ({}): \"{}\" (day {})", q.term, q.kind.label(), quoted, snippet.relative_day),
        None => format!("\"{}\" (day {})", quoted, snippet.relative_day),
    }
}

/// Rule-based sentence splitter: breaks at newlines and after `.`, `!` or
/// `?` when followed by whitespace or end of text. Returned slices are
/// trimmed substrings of `text`.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut bounds = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        let end = i + c.len_utf8();
        if c == '\n' {
            bounds.push((start, i));
            start = end;
        } else if matches!(c, '.' | '!' | '?') && text[end..].chars().next().is_none_or(char::is_whitespace) {
            bounds.push((start, end));
            start = end;
        }
    }
    bounds.push((start, text.len()));
    bounds
        .into_iter()
        .map(|(a, b)| text[a..b].trim())
        .filter(|t| !t.is_empty())
        .collect()
}

/// The chronologically last `limit` sentences of the past record.
pub fn all_ehr_evidence(timeline: &PatientTimeline, limit: usize) -> Vec<EvidenceSnippet> {
    let mut sentences: Vec<EvidenceSnippet> = timeline
        .past()
        .iter()
        .flat_map(|report| {
            let day = timeline.relative_day(report);
            split_sentences(&report.text).into_iter().map(move |s| EvidenceSnippet {
                query: None,
                report_id: report.report_id.clone(),
                relative_day: day,
                text: s.to_string(),
                confidence: None,
                origin: Origin::RawSentence,
            })
        })
        .collect();
    let skip = sentences.len().saturating_sub(limit.max(1));
    sentences.drain(..skip);
    sentences
}

/// One line of an evidence file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEvidence {
    pub patient_id: String,
    pub split_index: usize,
    pub snippets: Vec<EvidenceSnippet>,
}

pub fn write_evidence(path: &Path, records: &[PatientEvidence]) -> Result<(), EvidenceError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("evidence serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| EvidenceError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_evidence(path: &Path) -> Result<Vec<PatientEvidence>, EvidenceError> {
    let file_err = |message: String| EvidenceError::File {
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
    use crate::llm::{FixtureRule, MockBackend, Recording};
    use proptest::prelude::*;

    fn report(id: &str, date: &str, text: &str) -> Report {
        Report {
            patient_id: "p".into(),
            report_id: id.into(),
            date: date.parse().unwrap(),
            report_type: "nursing".into(),
            text: text.into(),
            admitting_diagnosis_span: None,
        }
    }

    fn pneumonia() -> Query {
        Query::new("pneumonia", QueryKind::Risk)
    }

    fn gate_says(answer: &str) -> MockBackend {
        MockBackend::new(vec![
            FixtureRule::substring("Choice: -Yes -No", answer),
            FixtureRule::substring("why is the patient at risk", "The patient has a cough."),
        ])
    }

    #[test]
    fn gate_parsing_examples() {
        let r = report("r1", "2100-01-01", "Cough.");
        assert!(evidence_exists(&r, &pneumonia(), &gate_says("Yes")).unwrap());
        assert!(!evidence_exists(&r, &pneumonia(), &gate_says("No evidence found")).unwrap());
        assert!(evidence_exists(&r, &pneumonia(), &gate_says("yes.")).unwrap());
    }

    #[test]
    fn get_evidence_trims_and_rejects_empty() {
        let r = report("r1", "2100-01-01", "Cough.");
        assert_eq!(get_evidence(&r, &pneumonia(), &gate_says("Yes")).unwrap(), "The patient has a cough.");
        let padded = MockBackend::new(vec![FixtureRule::substring("why is", "  snippet \n")]);
        assert_eq!(get_evidence(&r, &pneumonia(), &padded).unwrap(), "snippet");
        let blank = MockBackend::new(vec![FixtureRule::substring("why is", " \n ")]);
        assert!(matches!(
            get_evidence(&r, &pneumonia(), &blank),
            Err(EvidenceError::EmptyExtraction { .. })
        ));
    }

    #[test]
    fn retrieve_null_branch_skips_extractor() {
        let r = report("r1", "2100-01-01", "Cough.");
        let mock = Recording::new(gate_says("No"));
        assert_eq!(retrieve(&r, -1, &pneumonia(), &mock).unwrap(), None);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn retrieve_positive_and_error_branches() {
        let r = report("r1", "2100-01-01", "Cough.");
        let mock = MockBackend::new(vec![
            FixtureRule::substring("Choice: -Yes -No", "Yes"),
            FixtureRule::substring("why is", "has a cough").with_logprobs(vec![-0.2, -0.4]),
        ]);
        let s = retrieve(&r, -3, &pneumonia(), &mock).unwrap().unwrap();
        assert_eq!(s.text, "has a cough");
        assert_eq!(s.relative_day, -3);
        assert!((s.confidence.unwrap() + 0.3).abs() < 1e-12);
        assert_eq!(s.origin, Origin::Llm);

        let failing = MockBackend::new(vec![
            FixtureRule::substring("Choice: -Yes -No", "Yes"),
            FixtureRule::substring("why is", ""),
        ]);
        assert!(retrieve(&r, 0, &pneumonia(), &failing).is_err());
    }

    fn two_report_timeline() -> PatientTimeline {
        PatientTimeline::new(
            "p",
            vec![
                report("r1", "2100-01-01", "Productive cough noted."),
                report("r2", "2100-01-03", "Patient has a fever."),
            ],
        )
    }

    #[test]
    fn retrieve_all_counts_and_orders() {
        let t = two_report_timeline();
        let queries = vec![
            pneumonia(),
            Query::new("cancer", QueryKind::Signs),
            Query::new("a fever", QueryKind::RiskFactor),
        ];
        let mock = MockBackend::new(vec![
            FixtureRule::substring("Is the patient at risk of pneumonia?", "Yes").with_also(["cough"]),
            FixtureRule::substring("why is the patient at risk of pneumonia?", "Cough."),
            FixtureRule::substring("Does the patient have a fever?", "Yes").with_also(["fever."]),
            FixtureRule::substring("that the patient has a fever?", "Fever."),
        ]);
        let out = retrieve_all(&t, &queries, &mock).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].report_id.as_str(), out[0].relative_day), ("r1", -2));
        assert_eq!(out[0].query_term(), "pneumonia");
        assert_eq!((out[1].report_id.as_str(), out[1].relative_day), ("r2", 0));
        assert_eq!(out, retrieve_all(&t, &queries, &mock).unwrap());

        let none = MockBackend::new(vec![]);
        assert!(retrieve_all(&t, &queries, &none).unwrap().is_empty());
    }

    #[test]
    fn retrieve_all_error_names_report_and_query() {
        let t = two_report_timeline();
        let mock = MockBackend::new(vec![
            FixtureRule::substring("Choice: -Yes -No", "Yes"),
            FixtureRule::substring("why is", " "),
        ]);
        let err = retrieve_all(&t, &[pneumonia()], &mock).unwrap_err().to_string();
        assert!(err.contains("r1") && err.contains("pneumonia"), "{err}");
    }

    #[test]
    fn formatting_examples() {
        let mut s = EvidenceSnippet {
            query: Some(pneumonia()),
            report_id: "r".into(),
            relative_day: -5,
            text: "the patient has a cough.".into(),
            confidence: None,
            origin: Origin::Llm,
        };
        assert_eq!(format_for_model(&s), r#"pneumonia (diagnosis): "the patient has a cough." (day -5)"#);
        s.relative_day = 0;
        assert!(format_for_model(&s).ends_with("(day 0)"));
        s.query = Some(Query::new("a fever", QueryKind::RiskFactor));
        s.relative_day = -2;
        s.text = "...".into();
        assert_eq!(format_for_model(&s), r#"a fever (risk factor): "..." (day -2)"#);
        s.query = Some(Query::new("cancer", QueryKind::Signs));
        assert!(format_for_model(&s).starts_with("cancer (diagnosis): "));
    }

    #[test]
    fn sentence_splitter_rules() {
        assert_eq!(
            split_sentences("Cough noted. Fever 38.5 today!\nLungs clear?  Plan: CXR"),
            vec!["Cough noted.", "Fever 38.5 today!", "Lungs clear?", "Plan: CXR"]
        );
        assert!(split_sentences(" \n\n ").is_empty());
    }

    #[test]
    fn all_ehr_takes_the_last_sentences() {
        let t = PatientTimeline::new(
            "p",
            vec![
                report("r1", "2100-01-01", "A one. A two. A three. A four."),
                report("r2", "2100-01-02", "B one. B two. B three. B four."),
                report("r3", "2100-01-04", "C one.\nC two.\nC three. C four."),
            ],
        );
        let all = all_ehr_evidence(&t, 1000);
        assert_eq!(all.len(), 12);
        let last = all_ehr_evidence(&t, 5);
        let texts: Vec<_> = last.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["B four.", "C one.", "C two.", "C three.", "C four."]);
        assert_eq!(last[0].relative_day, -2);
        for s in &all {
            let source = t.reports.iter().find(|r| r.report_id == s.report_id).unwrap();
            assert!(source.text.contains(&s.text));
            assert_eq!(s.origin, Origin::RawSentence);
            assert!(s.query.is_none());
        }
    }

    #[test]
    fn all_ehr_caps_long_records() {
        let text: String = (0..100).map(|i| format!("Sentence {i}. ")).collect();
        let reports = (0..12)
            .map(|i| report(&format!("r{i:02}"), &format!("2100-01-{:02}", i + 1), &text))
            .collect();
        let t = PatientTimeline::new("p", reports);
        let out = all_ehr_evidence(&t, 1000);
        assert_eq!(out.len(), 1000);
        assert_eq!(out[0].report_id, "r02");
        assert_eq!(out.last().unwrap().report_id, "r11");
        assert_eq!(out.last().unwrap().text, "Sentence 99.");
    }

    #[test]
    fn default_query_set() {
        let qs = default_queries();
        assert_eq!(qs.len(), 27);
        let diag: Vec<_> = qs.iter().filter(|q| q.kind != QueryKind::RiskFactor).collect();
        assert_eq!(diag.len(), 6);
        assert!(qs.contains(&Query::new("neuralogical problems", QueryKind::RiskFactor)));
        assert!(qs.contains(&Query::new("a low ejection fraction", QueryKind::RiskFactor)));
        assert!(qs.contains(&Query::new("pulmonary edema", QueryKind::Signs)));
    }

    proptest! {
        #[test]
        fn formatting_is_injective(
            t1 in "[a-z ]{1,8}", t2 in "[a-z ]{1,8}",
            k1 in 0usize..3, k2 in 0usize..3,
            x1 in ".{0,12}", x2 in ".{0,12}",
            d1 in -50i64..1, d2 in -50i64..1,
        ) {
            let kinds = [QueryKind::Risk, QueryKind::Signs, QueryKind::RiskFactor];
            let mk = |t: &str, k: usize, x: &str, d: i64| EvidenceSnippet {
                query: Some(Query::new(t, kinds[k])),
                report_id: "r".into(),
                relative_day: d,
                text: x.into(),
                confidence: None,
                origin: Origin::Llm,
            };
            let a = mk(&t1, k1, &x1, d1);
            let b = mk(&t2, k2, &x2, d2);
            let key_a = (t1.clone(), kinds[k1].label(), x1.clone(), d1);
            let key_b = (t2.clone(), kinds[k2].label(), x2.clone(), d2);
            if key_a != key_b {
                prop_assert_ne!(format_for_model(&a), format_for_model(&b));
            }
        }
    }
}
