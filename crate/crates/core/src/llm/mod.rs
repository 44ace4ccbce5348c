//! Text-generation gateway.
//!
//! Every model call in the pipeline goes through the [`Backend`] trait. Three
//! implementations are provided: a deterministic [`MockBackend`] driven by a
//! fixture table, a [`RemoteBackend`] speaking a minimal HTTP completion
//! protocol, and a [`CachedBackend`] wrapper that stores completions on disk.

mod cache;
mod mock;
pub mod prompts;
mod remote;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::CachedBackend;
pub use mock::{FixtureRule, MatchKind, MockBackend, MockFixtures};
pub use prompts::{render, AnswerKind, PromptTemplate};
pub use remote::RemoteBackend;

/// Default generation budget for remote backends.
pub const DEFAULT_MAX_TOKENS: u32 = 64;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },
    #[error("transport failure for prompt {prompt_hash}: {message}")]
    Transport { prompt_hash: String, message: String },
    #[error("backend `{backend}` returned empty text for prompt {prompt_hash}")]
    EmptyCompletion { backend: String, prompt_hash: String },
    #[error("completion carries no token log-probabilities")]
    NoLogprobs,
    #[error("invalid completion: {0}")]
    InvalidCompletion(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Natural-log token probabilities; empty when the backend does not report them.
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
    pub backend_id: String,
}

impl Completion {
    pub fn has_logprobs(&self) -> bool {
        !self.token_logprobs.is_empty()
    }
}

/// Mean token log-probability of a completion.
pub fn length_normalized_logprob(completion: &Completion) -> Result<f64, GatewayError> {
    let lp = &completion.token_logprobs;
    if lp.is_empty() {
        return Err(GatewayError::NoLogprobs);
    }
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Affirmative iff the first whitespace-delimited token, stripped of
/// surrounding punctuation, is "yes" in any case.
pub fn parse_binary(text: &str) -> bool {
    text.split_whitespace()
        .next()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()))
        .is_some_and(|tok| tok.eq_ignore_ascii_case("yes"))
}

/// Short identifier for a prompt, used in error messages and logs.
pub fn prompt_hash(prompt: &str) -> String {
    crate::keyed::content_hash(&[prompt])[..16].to_string()
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        (**self).complete(prompt)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        (**self).complete(prompt)
    }
}

pub(crate) fn non_empty(completion: Completion, prompt: &str) -> Result<Completion, GatewayError> {
    if completion.text.is_empty() {
        return Err(GatewayError::EmptyCompletion {
            backend: completion.backend_id,
            prompt_hash: prompt_hash(prompt),
        });
    }
    if completion.token_logprobs.iter().any(|lp| lp.is_nan() || *lp > 0.0) {
        return Err(GatewayError::InvalidCompletion(format!(
            "positive or NaN log-probability from `{}`",
            completion.backend_id
        )));
    }
    Ok(completion)
}

/// Wraps a backend and records every prompt it receives, in call order.
pub struct Recording<B> {
    inner: B,
    log: Mutex<Vec<String>>,
}

impl<B: Backend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Recording {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.log.lock().expect("recording lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.log.lock().expect("recording lock").len()
    }

    pub fn clear(&self) {
        self.log.lock().expect("recording lock").clear();
    }
}

impl<B: Backend> Backend for Recording<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        self.log.lock().expect("recording lock").push(prompt.to_string());
        self.inner.complete(prompt)
    }
}
