//! Desk-scale synthetic corpora with planted signal, plus the mock-backend
//! rules that make the retrieval and labeling prompts behave sensibly on them.
//!
//! Layout of a generated patient:
//! - every report except the last gets filler sentences, and for each
//!   condition the patient has, one "Patient noted to have {symptom}." line;
//! - some reports get a distractor sentence tied to a risk-factor query;
//! - the last report (always in the future for any legal split) carries an
//!   `Impression:` line naming the patient's diagnoses, or a benign
//!   impression for all-negative patients, who may also get an admitting
//!   diagnosis line marked by a span.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CharSpan, Corpus, CorpusError, Report};
use crate::keyed::{content_hash, keyed_rng};
use crate::llm::FixtureRule;

pub const BENIGN_IMPRESSION: &str = "Impression: Healing rib fracture.\n";
const BENIGN_TERM: &str = "rib fracture";
const TRAP_LINE_PREFIX: &str = "Admitting Diagnosis: ";

const FILLER: &[&str] = &[
    "Vital signs were reviewed with the care team.",
    "No acute distress noted at the time of examination.",
    "Patient ambulating in the hallway with assistance.",
    "Medications reconciled with the pharmacy record.",
    "Family visited in the afternoon.",
    "Diet tolerated without issue.",
    "Skin intact without breakdown.",
    "Plan discussed with the patient who agrees.",
    "Sleeping comfortably overnight.",
    "Pain controlled on the current regimen.",
];

const REPORT_TYPES: &[&str] = &["nursing", "radiology", "physician"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub prevalence: f64,
    pub symptom_phrases: Vec<String>,
    pub diagnosis_phrases: Vec<String>,
}

/// A neutral sentence that the matching risk-factor query will surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub text: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub patients: usize,
    pub conditions: BTreeMap<String, ConditionSpec>,
    pub reports_min: usize,
    pub reports_max: usize,
    #[serde(default = "default_distractors")]
    pub distractors: Vec<Distractor>,
}

fn default_distractors() -> Vec<Distractor> {
    [
        ("Complains of intermittent back pain after lifting boxes.", "back pain"),
        ("Reports mild tiredness after physical therapy.", "tiredness"),
        ("Former smoker with a remote pack-year history.", "a history of smoking"),
        ("Brief chest pain after meals relieved by antacids.", "chest pain"),
        ("Mild hoarseness following a recent dental procedure.", "hoarseness"),
        ("Uses an inhaled steroid for seasonal allergies.", "steroid use"),
    ]
    .into_iter()
    .map(|(text, query)| Distractor {
        text: text.into(),
        query: query.into(),
    })
    .collect()
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl SyntheticSpec {
    /// Cancer, pneumonia and pulmonary edema, each at `prevalence`.
    pub fn three_conditions(patients: usize, prevalence: f64) -> Self {
        let mut conditions = BTreeMap::new();
        conditions.insert(
            "cancer".to_string(),
            ConditionSpec {
                prevalence,
                symptom_phrases: strings(&[
                    "a firm palpable breast mass",
                    "an enlarging palpable breast mass",
                    "a hard fixed breast mass",
                ]),
                diagnosis_phrases: strings(&[
                    "Biopsy confirms metastatic carcinoma.",
                    "Imaging and pathology diagnostic of malignancy.",
                ]),
            },
        );
        conditions.insert(
            "pneumonia".to_string(),
            ConditionSpec {
                prevalence,
                symptom_phrases: strings(&[
                    "a productive cough with green sputum",
                    "a wet cough with purulent sputum",
                    "a worsening cough with rusty sputum",
                ]),
                diagnosis_phrases: strings(&[
                    "Lobar consolidation consistent with infection.",
                    "Sputum culture grew streptococcus.",
                ]),
            },
        );
        conditions.insert(
            "pulmonary edema".to_string(),
            ConditionSpec {
                prevalence,
                symptom_phrases: strings(&[
                    "bilateral pitting leg swelling",
                    "pitting ankle swelling bilaterally",
                    "worsening pitting leg swelling",
                ]),
                diagnosis_phrases: strings(&[
                    "Vascular congestion with interstitial fluid.",
                    "Kerley B lines and bilateral effusions.",
                ]),
            },
        );
        SyntheticSpec {
            patients,
            conditions,
            reports_min: 3,
            reports_max: 6,
            distractors: default_distractors(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.patients == 0 {
            return bad("patients must be at least 1".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        if self.reports_min < 2 {
            return bad("reports_min must be at least 2 so every timeline can be split".into());
        }
        if self.reports_max < self.reports_min {
            return bad("reports_max must be >= reports_min".into());
        }
        for (name, c) in &self.conditions {
            if name.trim().is_empty() || name != &name.to_lowercase() {
                return bad(format!("condition `{name}` must be non-empty lowercase"));
            }
            if !(c.prevalence > 0.0 && c.prevalence < 1.0) {
                return bad(format!("prevalence of `{name}` must lie in (0, 1), got {}", c.prevalence));
            }
            if c.symptom_phrases.is_empty() || c.diagnosis_phrases.is_empty() {
                return bad(format!("condition `{name}` needs symptom and diagnosis phrases"));
            }
            if c.symptom_phrases.iter().chain(&c.diagnosis_phrases).any(|p| p.trim().is_empty()) {
                return bad(format!("condition `{name}` has an empty phrase"));
            }
        }
        for d in &self.distractors {
            if d.text.trim().is_empty() || d.query.trim().is_empty() {
                return bad("distractors need non-empty text and query".into());
            }
        }
        Ok(())
    }
}

pub fn symptom_sentence(phrase: &str) -> String {
    format!("Patient noted to have {phrase}.")
}

/// Abstractive rewording returned by the signs extractor.
pub fn signs_summary(phrase: &str) -> String {
    format!("Signs: {phrase}")
}

/// Generated corpus plus ground truth and matching mock rules.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Conditions planted per patient.
    pub truth: BTreeMap<String, BTreeSet<String>>,
    pub fixture_rules: Vec<FixtureRule>,
}

impl SyntheticCorpus {
    pub fn positives(&self, condition: &str) -> usize {
        self.truth.values().filter(|s| s.contains(condition)).count()
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus, CorpusError> {
    generate_synthetic(spec, seed).map(|s| s.corpus)
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    let base = NaiveDate::from_ymd_opt(2130, 1, 1).expect("valid date");
    let width = spec.patients.to_string().len().max(3);
    let mut reports = Vec::new();
    let mut truth = BTreeMap::new();
    // impression line -> diagnosed conditions, in condition order
    let mut impressions: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for i in 0..spec.patients {
        let pid = format!("p{i:0width$}");
        let mut rng = keyed_rng(seed, "synthetic", &pid);
        let positive: BTreeSet<String> = spec
            .conditions
            .iter()
            .filter(|(_, c)| rng.random::<f64>() < c.prevalence)
            .map(|(name, _)| name.clone())
            .collect();
        let n = rng.random_range(spec.reports_min..=spec.reports_max);
        let mut date = base + Duration::days(rng.random_range(0..365));

        for k in 0..n {
            let report_id = format!("{pid}-r{k:02}");
            let last = k + 1 == n;
            let mut lines: Vec<String> = Vec::new();
            let mut span = None;
            lines.push(FILLER.choose(&mut rng).expect("filler").to_string());
            if last {
                if positive.is_empty() {
                    if rng.random::<f64>() < 0.5 {
                        let decoy = spec.conditions.keys().collect::<Vec<_>>();
                        let decoy = decoy.choose(&mut rng).expect("conditions");
                        let line = format!("{TRAP_LINE_PREFIX}{decoy}\n");
                        let start = lines_char_len(&lines);
                        span = Some(CharSpan(start, start + line.chars().count()));
                        lines.push(line.trim_end().to_string());
                    }
                    lines.push(BENIGN_IMPRESSION.trim_end().to_string());
                } else {
                    let phrases: Vec<&str> = positive
                        .iter()
                        .map(|c| {
                            spec.conditions[c]
                                .diagnosis_phrases
                                .choose(&mut rng)
                                .expect("non-empty bank")
                                .as_str()
                        })
                        .collect();
                    let line = format!("Impression: {}", phrases.join(" "));
                    impressions.insert(line.clone(), positive.iter().cloned().collect());
                    lines.push(line);
                }
            } else {
                for c in &positive {
                    let phrase = spec.conditions[c].symptom_phrases.choose(&mut rng).expect("non-empty bank");
                    lines.push(symptom_sentence(phrase));
                }
                if !spec.distractors.is_empty() && rng.random::<f64>() < 0.5 {
                    lines.push(spec.distractors.choose(&mut rng).expect("non-empty").text.clone());
                }
                lines.push(FILLER.choose(&mut rng).expect("filler").to_string());
            }
            let report_type = if last {
                "discharge summary"
            } else {
                REPORT_TYPES[rng.random_range(0..REPORT_TYPES.len())]
            };
            let mut text = lines.join("\n");
            text.push('\n');
            reports.push(Report {
                patient_id: pid.clone(),
                report_id,
                date,
                report_type: report_type.to_string(),
                text,
                admitting_diagnosis_span: span,
            });
            date += Duration::days(rng.random_range(1..=30));
        }
        truth.insert(pid, positive);
    }

    let corpus = Corpus::from_reports(reports)?;
    let fixture_rules = fixture_rules(spec, &impressions);
    Ok(SyntheticCorpus {
        corpus,
        truth,
        fixture_rules,
    })
}

fn lines_char_len(lines: &[String]) -> usize {
    lines.iter().map(|l| l.chars().count() + 1).sum()
}

/// Deterministic log-probabilities in `[-1.5, -0.05]` per response text.
fn pseudo_logprobs(text: &str, tokens: usize) -> Vec<f64> {
    let h = content_hash(&["logprobs", text]);
    (0..tokens.max(1))
        .map(|t| {
            let byte = u8::from_str_radix(&h[(2 * t) % 62..(2 * t) % 62 + 2], 16).expect("hex");
            -0.05 - 1.45 * f64::from(byte) / 255.0
        })
        .collect()
}

fn answer(pattern: String, also: &str, response: String) -> FixtureRule {
    let lp = pseudo_logprobs(&response, response.split_whitespace().count());
    FixtureRule::substring(pattern, response).with_also([also]).with_logprobs(lp)
}

fn fixture_rules(spec: &SyntheticSpec, impressions: &BTreeMap<String, Vec<String>>) -> Vec<FixtureRule> {
    let mut rules = Vec::new();
    for (c, cs) in &spec.conditions {
        for s in &cs.symptom_phrases {
            rules.push(answer(format!("Is the patient at risk of {c}?"), s, "Yes".into()));
            rules.push(answer(
                format!("why is the patient at risk of {c}?"),
                s,
                symptom_sentence(s),
            ));
            rules.push(answer(format!("Does the patient have {c}?"), s, "Yes".into()));
            rules.push(answer(format!("Extract signs of {c} from the note."), s, signs_summary(s)));
        }
    }
    for d in &spec.distractors {
        rules.push(answer(format!("Does the patient have {}?", d.query), &d.text, "Yes".into()));
        rules.push(answer(
            format!("What evidence is there that the patient has {}?", d.query),
            &d.text,
            d.text.clone(),
        ));
    }

    let gate = "Is there a confident diagnosis of the patient's condition?";
    let reasoning = "What is the correct diagnosis of the patient's condition?";
    let terms = "Provide a list of diagnostic terms or write none.";
    rules.push(answer(gate.into(), "Impression: ", "Yes".into()));
    let mut push_chain = |line: &str, names: &[String]| {
        let statement = format!("The diagnosis is {}.", names.join("; "));
        rules.push(answer(
            reasoning.into(),
            &format!("{line}\n"),
            format!("The impression section states the key finding. {statement}"),
        ));
        let list = names.iter().map(|n| format!("- {n}")).collect::<Vec<_>>().join("\n");
        rules.push(answer(terms.into(), &statement, list));
    };
    for (line, names) in impressions {
        push_chain(line, names);
    }
    push_chain(BENIGN_IMPRESSION.trim_end(), &[BENIGN_TERM.to_string()]);
    rules
}
