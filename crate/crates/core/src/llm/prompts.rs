//! Prompt templates and rendering.
//!
//! Templates use two placeholders: `<input>` (report text, or a previous
//! completion) and `<query>` (the query term). Rendering is a single pass over
//! the template, so placeholder-like text inside the substituted values is
//! never re-expanded.

use serde::{Deserialize, Serialize};

use super::GatewayError;

pub const INPUT: &str = "<input>";
pub const QUERY: &str = "<query>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Binary,
    Freeform,
    List,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub expected_answer_kind: AnswerKind,
}

impl PromptTemplate {
    fn new(id: &str, body: &str, kind: AnswerKind) -> Self {
        PromptTemplate {
            template_id: id.to_string(),
            body: body.to_string(),
            expected_answer_kind: kind,
        }
    }

    pub fn takes_query(&self) -> bool {
        self.body.contains(QUERY)
    }
}

pub fn render(template: &PromptTemplate, input: &str, query: Option<&str>) -> Result<String, GatewayError> {
    let err = |message: &str| GatewayError::Template {
        template: template.template_id.clone(),
        message: message.to_string(),
    };
    match (template.takes_query(), query) {
        (true, None) => return Err(err("template needs a query but none was given")),
        (false, Some(_)) => return Err(err("query given for a template without <query>")),
        _ => {}
    }
    if !template.body.contains(INPUT) {
        return Err(err("template has no <input> placeholder"));
    }

    let mut out = String::with_capacity(template.body.len() + input.len() + 32);
    let mut rest = template.body.as_str();
    while let Some(pos) = rest.find('<') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(INPUT) {
            out.push_str(input);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(QUERY) {
            out.push_str(query.unwrap_or_default());
            rest = after;
        } else {
            out.push('<');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

pub fn risk_gate() -> PromptTemplate {
    PromptTemplate::new(
        "evidence.risk.gate",
        "Read the following clinical note of a patient:\n<input>\nQuestion: Is the patient at risk of <query>? Choice: -Yes -No\nAnswer:",
        AnswerKind::Binary,
    )
}

pub fn risk_extract() -> PromptTemplate {
    PromptTemplate::new(
        "evidence.risk.extract",
        "Read the following clinical note of a patient:\n<input>\nBased on the note, why is the patient at risk of <query>?\nAnswer step by step:",
        AnswerKind::Freeform,
    )
}

pub fn signs_gate() -> PromptTemplate {
    PromptTemplate::new(
        "evidence.signs.gate",
        "Read the following clinical note of a patient:\n<input>\nQuestion: Does the patient have <query>? Choice: -Yes -No\nAnswer:",
        AnswerKind::Binary,
    )
}

pub fn signs_extract() -> PromptTemplate {
    PromptTemplate::new(
        "evidence.signs.extract",
        "Read the following clinical note of a patient:\n<input>\nQuestion: Extract signs of <query> from the note.\nAnswer:",
        AnswerKind::Freeform,
    )
}

pub fn risk_factor_gate() -> PromptTemplate {
    PromptTemplate::new(
        "evidence.risk_factor.gate",
        "Read the following clinical note of a patient:\n<input>\nQuestion: Does the patient have <query>? Choice: -Yes -No\nAnswer:",
        AnswerKind::Binary,
    )
}

pub fn risk_factor_extract() -> PromptTemplate {
    PromptTemplate::new(
        "evidence.risk_factor.extract",
        "Read the following clinical note of a patient:\n<input>\nWhat evidence is there that the patient has <query>?\nAnswer:",
        AnswerKind::Freeform,
    )
}

pub fn confident_diagnosis_gate() -> PromptTemplate {
    PromptTemplate::new(
        "label.gate",
        "Read the following report:\n\n<input>\n\nQuestion: Is there a confident diagnosis of the patient's condition? Choice: -Yes -No\nAnswer:",
        AnswerKind::Binary,
    )
}

pub fn diagnosis_reasoning() -> PromptTemplate {
    PromptTemplate::new(
        "label.reasoning",
        "Read the following report:\n\n<input>\n\nAnswer step by step: What is the correct diagnosis of the patient's condition?\nAnswer:",
        AnswerKind::Freeform,
    )
}

/// Takes the reasoning completion as its `<input>`, never the report.
pub fn diagnostic_terms() -> PromptTemplate {
    PromptTemplate::new(
        "label.terms",
        "Here is a diagnosis of a patient:\n\n<input>\n\nQuestion: Provide a list of diagnostic terms or write none.\nAnswer:",
        AnswerKind::List,
    )
}
