//! Clinician annotation records and the session protocol.
//!
//! A session moves through the stages in order:
//!
//! 1. `reviewing`: the annotator reads the past record;
//! 2. `explicit_check`: is any condition already stated outright? If so the
//!    session ends immediately;
//! 3. `likelihoods`: the annotator's own estimate per condition, given before
//!    any model output is shown;
//! 4. `prediction_feedback`: model probabilities are revealed and the
//!    annotator says whether they align with intuition;
//! 5. `evidence_loop`: ranked evidence, one item at a time, at most
//!    [`MAX_EVIDENCE`];
//! 6. `final`: whether the evidence changed the annotator's mind.
//!
//! Every transition here is a pure function of the session and its input so
//! the service can replay an event log into identical state.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::Origin;

pub const MAX_EVIDENCE: usize = 10;
/// Items that must be annotated before more evidence or the final stage.
pub const MIN_EVIDENCE: usize = 2;
pub const MAX_ANNOTATORS_PER_PATIENT: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    /// The request is well-formed but not allowed in the current state.
    #[error("{0}")]
    Conflict(String),
    /// The request body is invalid.
    #[error("{0}")]
    Invalid(String),
}

fn conflict<T>(msg: impl Into<String>) -> Result<T, ProtocolError> {
    Err(ProtocolError::Conflict(msg.into()))
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ProtocolError> {
    Err(ProtocolError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    LlmLogodds,
    LlmConfidence,
    AllehrLogodds,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [
        ModelVariant::LlmLogodds,
        ModelVariant::LlmConfidence,
        ModelVariant::AllehrLogodds,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::LlmLogodds => "llm_logodds",
            ModelVariant::LlmConfidence => "llm_confidence",
            ModelVariant::AllehrLogodds => "allehr_logodds",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reviewing,
    ExplicitCheck,
    Likelihoods,
    PredictionFeedback,
    EvidenceLoop,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Unlikely,
    SomewhatLikely,
    VeryLikely,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usefulness {
    NotRelevant,
    WeaklyCorrelated,
    Useful,
    VeryUseful,
}

impl Usefulness {
    pub const ALL: [Usefulness; 4] = [
        Usefulness::NotRelevant,
        Usefulness::WeaklyCorrelated,
        Usefulness::Useful,
        Usefulness::VeryUseful,
    ];

    pub fn is_useful(self) -> bool {
        matches!(self, Usefulness::Useful | Usefulness::VeryUseful)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Usefulness::NotRelevant => "not_relevant",
            Usefulness::WeaklyCorrelated => "weakly_correlated",
            Usefulness::Useful => "useful",
            Usefulness::VeryUseful => "very_useful",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hallucination {
    No,
    Partial,
    Yes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNo {
    Yes,
    No,
}

/// One annotated evidence item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceAnnotation {
    pub rank: usize,
    pub usefulness: BTreeMap<String, Usefulness>,
    /// Present exactly for the conditions judged useful or very useful.
    #[serde(default)]
    pub intuitive: BTreeMap<String, bool>,
    /// Present iff some condition is judged useful or very useful.
    #[serde(default)]
    pub seen_in_review: Option<bool>,
}

impl EvidenceAnnotation {
    pub fn is_useful(&self) -> bool {
        self.usefulness.values().any(|u| u.is_useful())
    }

    /// Highest usefulness across conditions.
    pub fn best(&self) -> Option<Usefulness> {
        self.usefulness.values().copied().max()
    }

    pub fn validate(&self, conditions: &[String]) -> Result<(), ProtocolError> {
        check_keys(&self.usefulness, conditions, "usefulness")?;
        for (c, u) in &self.usefulness {
            match (u.is_useful(), self.intuitive.contains_key(c)) {
                (true, false) => return invalid(format!("`intuitive` is required for `{c}` (judged {})", u.as_str())),
                (false, true) => {
                    return invalid(format!("`intuitive` must be omitted for `{c}` (judged {})", u.as_str()))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.intuitive.keys().find(|c| !self.usefulness.contains_key(*c)) {
            return invalid(format!("`intuitive` names unknown condition `{extra}`"));
        }
        match (self.is_useful(), self.seen_in_review.is_some()) {
            (true, false) => invalid("`seen_in_review` is required when any condition is judged useful"),
            (false, true) => invalid("`seen_in_review` must be omitted unless some condition is judged useful"),
            _ => Ok(()),
        }
    }
}

/// A likelihood the annotator revised after seeing the evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikelihoodChange {
    pub from: Likelihood,
    pub to: Likelihood,
}

/// Snapshot of an evidence item at the moment it was served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedEvidence {
    pub rank: usize,
    pub report_id: String,
    pub query: Option<String>,
    pub text: String,
    pub relative_day: i64,
    pub origin: Origin,
    pub duplicate_of: Option<usize>,
}

fn check_keys<V>(map: &BTreeMap<String, V>, conditions: &[String], what: &str) -> Result<(), ProtocolError> {
    if let Some(extra) = map.keys().find(|k| !conditions.contains(k)) {
        return invalid(format!("{what}: unknown condition `{extra}`"));
    }
    if let Some(missing) = conditions.iter().find(|c| !map.contains_key(*c)) {
        return invalid(format!("{what}: missing condition `{missing}`"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub annotator_id: String,
    pub patient_id: String,
    pub model_variant: ModelVariant,
    pub conditions: Vec<String>,
    pub stage: Stage,
    pub created_at: DateTime<Utc>,
    /// Start of the review timer: first timeline fetch, else session creation.
    pub review_started_at: DateTime<Utc>,
    pub review_seconds: Option<f64>,
    /// Past reports shown for review.
    pub reports_reviewed: usize,
    /// Ranked evidence items available for this patient and variant.
    pub evidence_available: usize,
    pub explicit: Option<BTreeMap<String, bool>>,
    pub likelihoods: Option<BTreeMap<String, Likelihood>>,
    pub prediction_feedback: Option<BTreeMap<String, bool>>,
    pub served: Vec<ServedEvidence>,
    pub annotations: Vec<EvidenceAnnotation>,
    pub changed_mind: Option<BTreeMap<String, Option<LikelihoodChange>>>,
    /// True when the explicit check ended the session early.
    pub skipped: bool,
}

impl AnnotationSession {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        session_id: String,
        annotator_id: String,
        patient_id: String,
        model_variant: ModelVariant,
        conditions: Vec<String>,
        created_at: DateTime<Utc>,
        review_started_at: Option<DateTime<Utc>>,
        reports_reviewed: usize,
        evidence_available: usize,
    ) -> Self {
        AnnotationSession {
            session_id,
            annotator_id,
            patient_id,
            model_variant,
            conditions,
            stage: Stage::Reviewing,
            created_at,
            review_started_at: review_started_at.unwrap_or(created_at),
            review_seconds: None,
            reports_reviewed,
            evidence_available,
            explicit: None,
            likelihoods: None,
            prediction_feedback: None,
            served: Vec::new(),
            annotations: Vec::new(),
            changed_mind: None,
            skipped: false,
        }
    }

    fn expect_stage(&self, allowed: &[Stage], action: &str) -> Result<(), ProtocolError> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            conflict(format!("cannot {action} while session is in stage {:?}", self.stage))
        }
    }

    pub fn finish_review(&mut self) -> Result<(), ProtocolError> {
        self.expect_stage(&[Stage::Reviewing], "finish review")?;
        self.stage = Stage::ExplicitCheck;
        Ok(())
    }

    /// Records the explicit-diagnosis answers; any `true` ends the session.
    pub fn submit_explicit(&mut self, answers: BTreeMap<String, bool>) -> Result<(), ProtocolError> {
        self.expect_stage(&[Stage::Reviewing, Stage::ExplicitCheck], "answer the explicit-diagnosis question")?;
        check_keys(&answers, &self.conditions, "explicit")?;
        let any = answers.values().any(|v| *v);
        self.explicit = Some(answers);
        if any {
            self.skipped = true;
            self.stage = Stage::Final;
        } else {
            self.stage = Stage::Likelihoods;
        }
        Ok(())
    }

    pub fn submit_likelihoods(
        &mut self,
        answers: BTreeMap<String, Likelihood>,
        at: DateTime<Utc>,
    ) -> Result<(), ProtocolError> {
        self.expect_stage(&[Stage::Likelihoods], "submit likelihoods")?;
        check_keys(&answers, &self.conditions, "likelihoods")?;
        self.likelihoods = Some(answers);
        let millis = (at - self.review_started_at).num_milliseconds().max(0);
        self.review_seconds = Some(millis as f64 / 1000.0);
        self.stage = Stage::PredictionFeedback;
        Ok(())
    }

    /// Whether model output may be shown.
    pub fn predictions_unlocked(&self) -> bool {
        self.likelihoods.is_some() && !self.skipped
    }

    pub fn check_prediction_access(&self) -> Result<(), ProtocolError> {
        if self.predictions_unlocked() {
            Ok(())
        } else if self.skipped {
            conflict("session ended at the explicit-diagnosis check; no predictions are shown")
        } else {
            conflict("likelihoods must be submitted before predictions are shown")
        }
    }

    pub fn submit_prediction_feedback(&mut self, aligns: BTreeMap<String, bool>) -> Result<(), ProtocolError> {
        if !self.predictions_unlocked() {
            return self.check_prediction_access();
        }
        self.expect_stage(&[Stage::PredictionFeedback], "submit prediction feedback")?;
        check_keys(&aligns, &self.conditions, "prediction_feedback")?;
        self.prediction_feedback = Some(aligns);
        self.stage = Stage::EvidenceLoop;
        Ok(())
    }

    /// Rank of a served item still awaiting annotation.
    pub fn pending_rank(&self) -> Option<usize> {
        self.served.get(self.annotations.len()).map(|s| s.rank)
    }

    /// Rank of the next item to serve. When an item is outstanding the
    /// caller should re-serve it rather than advance.
    pub fn next_evidence_rank(&self) -> Result<usize, ProtocolError> {
        if !self.predictions_unlocked() {
            self.check_prediction_access()?;
        }
        self.expect_stage(&[Stage::EvidenceLoop], "request evidence")?;
        if let Some(rank) = self.pending_rank() {
            return Ok(rank);
        }
        if self.served.len() >= MAX_EVIDENCE {
            return conflict(format!("maximum {MAX_EVIDENCE} evidence items per session reached"));
        }
        if self.served.len() >= self.evidence_available {
            return conflict("no more evidence is available for this patient");
        }
        Ok(self.served.len() + 1)
    }

    pub fn record_served(&mut self, item: ServedEvidence) -> Result<(), ProtocolError> {
        let expected = self.next_evidence_rank()?;
        if self.pending_rank().is_some() || item.rank != expected {
            return conflict(format!("evidence rank {} cannot be served now", item.rank));
        }
        self.served.push(item);
        Ok(())
    }

    pub fn annotate(&mut self, annotation: EvidenceAnnotation) -> Result<(), ProtocolError> {
        self.expect_stage(&[Stage::EvidenceLoop], "annotate evidence")?;
        if self.annotations.iter().any(|a| a.rank == annotation.rank) {
            return conflict(format!(
                "evidence rank {} is already annotated; annotations cannot be revised",
                annotation.rank
            ));
        }
        match self.pending_rank() {
            Some(rank) if rank == annotation.rank => {}
            _ => return conflict(format!("evidence rank {} has not been served", annotation.rank)),
        }
        annotation.validate(&self.conditions)?;
        self.annotations.push(annotation);
        Ok(())
    }

    /// Items required before the final stage (fewer when the patient has
    /// fewer ranked items).
    pub fn required_annotations(&self) -> usize {
        MIN_EVIDENCE.min(self.evidence_available)
    }

    pub fn submit_final(
        &mut self,
        changed_mind: BTreeMap<String, Option<LikelihoodChange>>,
    ) -> Result<(), ProtocolError> {
        self.expect_stage(&[Stage::EvidenceLoop], "submit the final answers")?;
        if self.annotations.len() < self.required_annotations() {
            return conflict(format!(
                "at least {} evidence items must be annotated first ({} so far)",
                self.required_annotations(),
                self.annotations.len()
            ));
        }
        if self.pending_rank().is_some() {
            return conflict("annotate the outstanding evidence item first");
        }
        check_keys(&changed_mind, &self.conditions, "changed_mind")?;
        let before = self.likelihoods.as_ref().expect("likelihoods precede the evidence loop");
        for (c, change) in &changed_mind {
            if let Some(change) = change {
                if change.from != before[c] {
                    return invalid(format!(
                        "changed_mind for `{c}` starts from {:?} but the recorded likelihood is {:?}",
                        change.from, before[c]
                    ));
                }
                if change.from == change.to {
                    return invalid(format!("changed_mind for `{c}` does not change the likelihood"));
                }
            }
        }
        self.changed_mind = Some(changed_mind);
        self.stage = Stage::Final;
        Ok(())
    }
}

/// Verdict on an extracted label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVerdict {
    pub label_id: String,
    pub annotator_id: String,
    pub confident: YesNo,
    /// Asked only when `confident` is yes.
    #[serde(default)]
    pub earlier_likely: Option<YesNo>,
    pub at: DateTime<Utc>,
}

impl LabelVerdict {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        match (self.confident, self.earlier_likely) {
            (YesNo::Yes, None) => invalid("`earlier_likely` is required when `confident` is yes"),
            (YesNo::No, Some(_)) => invalid("`earlier_likely` must be omitted when `confident` is no"),
            _ => Ok(()),
        }
    }
}

/// Hallucination judgement on an abstractive evidence item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub item_id: String,
    pub annotator_id: String,
    pub verdict: Hallucination,
    #[serde(default)]
    pub explanation: Option<String>,
    pub at: DateTime<Utc>,
}

impl AuditVerdict {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let has_text = self.explanation.as_deref().is_some_and(|e| !e.trim().is_empty());
        if self.verdict != Hallucination::No && !has_text {
            return invalid("an explanation is required for partial or full hallucinations");
        }
        Ok(())
    }
}

/// One line of the annotation export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExportRecord {
    Session(Box<AnnotationSession>),
    LabelVerdict(LabelVerdict),
    AuditVerdict(AuditVerdict),
}

/// Sessions from export lines, skipping the other record kinds.
pub fn sessions_from_export(input: &str) -> Result<Vec<AnnotationSession>, serde_json::Error> {
    let mut sessions = Vec::new();
    for line in input.lines().filter(|l| !l.trim().is_empty()) {
        if let ExportRecord::Session(s) = serde_json::from_str(line)? {
            sessions.push(*s);
        }
    }
    Ok(sessions)
}
