//! Interpretable risk prediction from longitudinal clinical notes.
//!
//! Evidence snippets are pulled from a patient's past reports by prompting a
//! text-generation backend, embedded with a frozen feature map, and scored
//! by an additive model whose per-snippet log odds ratios average into the
//! patient-level prediction. Training labels come from confident diagnoses
//! found in the same patient's future reports.
//!
//! Modules, roughly in pipeline order:
//! - [`corpus`]: report timelines, past/future splits, subsampling, synthetic data;
//! - [`llm`]: prompt templates and completion backends (mock, cached, HTTP);
//! - [`evidence`]: gated retrieval of snippets and the raw-sentence baseline;
//! - [`labeler`]: future-report label extraction and term normalization;
//! - [`embedder`]: feature and similarity embeddings;
//! - [`nam`]: the additive model and its training loop;
//! - [`ranker`]: evidence ordering;
//! - [`eval`]: metrics, agreement, ablations and CSV output;
//! - [`annotation`]: clinician review records and session protocol;
//! - [`pipeline`]: seeded end-to-end runs.

pub mod annotation;
pub mod corpus;
pub mod embedder;
pub mod eval;
pub mod evidence;
pub mod keyed;
pub mod labeler;
pub mod llm;
pub mod nam;
pub mod pipeline;
pub mod ranker;

use thiserror::Error;

/// Any failure from the pipeline, grouped by the stage that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Gateway(#[from] llm::GatewayError),
    #[error(transparent)]
    Evidence(#[from] evidence::EvidenceError),
    #[error(transparent)]
    Label(#[from] labeler::LabelError),
    #[error(transparent)]
    Embed(#[from] embedder::EmbedError),
    #[error(transparent)]
    Model(#[from] nam::ModelError),
    #[error(transparent)]
    Rank(#[from] ranker::RankError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

impl Error {
    /// True when the failure came from a completion or embedding backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Gateway(_)
                | Error::Embed(embedder::EmbedError::Transport(_))
                | Error::Evidence(evidence::EvidenceError::Gateway { .. })
                | Error::Label(labeler::LabelError::Gateway(_))
        )
    }
}
