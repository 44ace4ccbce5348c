use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{non_empty, Backend, Completion, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Substring,
}

/// One fixture entry. Rules are tried in order; the first match wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRule {
    #[serde(rename = "match")]
    pub match_kind: MatchKind,
    pub pattern: String,
    /// Extra substrings that must all be present for a substring rule to fire.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl FixtureRule {
    pub fn exact(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        FixtureRule {
            match_kind: MatchKind::Exact,
            pattern: prompt.into(),
            also: Vec::new(),
            response: response.into(),
            token_logprobs: None,
        }
    }

    pub fn substring(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        FixtureRule {
            match_kind: MatchKind::Substring,
            pattern: pattern.into(),
            also: Vec::new(),
            response: response.into(),
            token_logprobs: None,
        }
    }

    pub fn with_also(mut self, also: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.also = also.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_logprobs(mut self, lp: Vec<f64>) -> Self {
        self.token_logprobs = Some(lp);
        self
    }

    fn matches(&self, prompt: &str) -> bool {
        match self.match_kind {
            MatchKind::Exact => prompt == self.pattern,
            MatchKind::Substring => {
                prompt.contains(&self.pattern) && self.also.iter().all(|s| prompt.contains(s.as_str()))
            }
        }
    }
}

/// Fixture file contents: either a bare rule list or an object with a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockFixtures {
    Rules(Vec<FixtureRule>),
    Full {
        #[serde(default = "default_response")]
        default_response: String,
        #[serde(default)]
        default_token_logprobs: Option<Vec<f64>>,
        rules: Vec<FixtureRule>,
    },
}

fn default_response() -> String {
    "No".to_string()
}

/// Deterministic backend: a pure function of its fixture table and the prompt.
#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    rules: Vec<FixtureRule>,
    default_response: String,
    default_logprobs: Option<Vec<f64>>,
}

impl MockBackend {
    pub fn new(rules: Vec<FixtureRule>) -> Self {
        MockBackend {
            id: "mock".to_string(),
            rules,
            default_response: default_response(),
            default_logprobs: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_default(mut self, response: impl Into<String>, logprobs: Option<Vec<f64>>) -> Self {
        self.default_response = response.into();
        self.default_logprobs = logprobs;
        self
    }

    pub fn from_fixtures(fixtures: MockFixtures) -> Result<Self, GatewayError> {
        let backend = match fixtures {
            MockFixtures::Rules(rules) => MockBackend::new(rules),
            MockFixtures::Full {
                default_response,
                default_token_logprobs,
                rules,
            } => MockBackend::new(rules).with_default(default_response, default_token_logprobs),
        };
        for rule in &backend.rules {
            if let Some(lp) = &rule.token_logprobs {
                if lp.iter().any(|v| v.is_nan() || *v > 0.0) {
                    return Err(GatewayError::Fixture(format!(
                        "rule `{}` has a positive log-probability",
                        rule.pattern
                    )));
                }
            }
        }
        Ok(backend)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let fixtures: MockFixtures =
            serde_json::from_str(&text).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        MockBackend::from_fixtures(fixtures)
    }

    pub fn rules(&self) -> &[FixtureRule] {
        &self.rules
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        let (text, lp) = match self.rules.iter().find(|r| r.matches(prompt)) {
            Some(rule) => (rule.response.clone(), rule.token_logprobs.clone()),
            None => (self.default_response.clone(), self.default_logprobs.clone()),
        };
        non_empty(
            Completion {
                text,
                token_logprobs: lp.unwrap_or_default(),
                backend_id: self.id.clone(),
            },
            prompt,
        )
    }
}
