//! Neural additive risk head.
//!
//! Each condition `i` has a weight vector `w_i` over the frozen feature space
//! and a bias `b_i` fixed to the inverse sigmoid of the condition's training
//! prevalence. The aggregate prediction is
//!
//! ```text
//! p(y_i = 1 | e_1..e_E) = sigmoid(b_i + w_i · mean_j f(e_j))
//! ```
//!
//! and each snippet casts a "vote" `sigmoid(b_i + w_i · f(e_j))`. Because the
//! bias is the prior logit, `w_i · f(e_j)` is that snippet's log odds ratio and
//! the aggregate log odds ratio is exactly their mean. Swapping the bias for
//! another population's prevalence recalibrates probabilities without touching
//! any vote's log odds ratio.

mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::EvidenceSnippet;
use crate::labeler::ConditionSet;

pub use train::{loss_and_gradient, train, CheckpointRecord, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension {got} does not match model dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("prevalence for `{condition}` must lie in (0, 1), got {value}")]
    Prevalence { condition: String, value: f64 },
    #[error("expected {expected} values (one per condition), got {got}")]
    ConditionCount { expected: usize, got: usize },
    #[error("{0}")]
    EmptyData(String),
    #[error("example `{id}`: {message}")]
    Example { id: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid.
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub conditions: ConditionSet,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub train_prevalence: Vec<f64>,
    pub embedder_id: String,
    pub d: usize,
}

/// Per-evidence output: probability and log odds ratio for every condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub probabilities: Vec<f64>,
    pub log_odds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub prior: Vec<f64>,
    /// `w_i · mean feature` per condition.
    pub aggregate_log_odds: Vec<f64>,
    /// `per_evidence[j][i] = w_i · f(e_j)`.
    pub per_evidence: Vec<Vec<f64>>,
    pub relative_risk: Vec<f64>,
}

fn check_prevalence(conditions: &ConditionSet, prevalence: &[f64]) -> Result<(), ModelError> {
    if prevalence.len() != conditions.len() {
        return Err(ModelError::ConditionCount {
            expected: conditions.len(),
            got: prevalence.len(),
        });
    }
    for (c, &p) in conditions.iter().zip(prevalence) {
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::Prevalence {
                condition: c.clone(),
                value: p,
            });
        }
    }
    Ok(())
}

impl RiskModel {
    /// Zero weights; biases set from `train_prevalence`.
    pub fn new(
        conditions: ConditionSet,
        d: usize,
        train_prevalence: Vec<f64>,
        embedder_id: impl Into<String>,
    ) -> Result<Self, ModelError> {
        check_prevalence(&conditions, &train_prevalence)?;
        let q = conditions.len();
        Ok(RiskModel {
            biases: train_prevalence.iter().map(|&p| logit(p)).collect(),
            weights: vec![vec![0.0; d]; q],
            conditions,
            train_prevalence,
            embedder_id: embedder_id.into(),
            d,
        })
    }

    pub fn with_weights(mut self, weights: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if weights.len() != self.conditions.len() {
            return Err(ModelError::ConditionCount {
                expected: self.conditions.len(),
                got: weights.len(),
            });
        }
        for w in &weights {
            self.check_dim(w)?;
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), ModelError> {
        if v.len() != self.d {
            return Err(ModelError::Dimension {
                expected: self.d,
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn prior(&self) -> Vec<f64> {
        self.biases.iter().map(|&b| sigmoid(b)).collect()
    }

    /// `w_i · f` for every condition.
    pub fn log_odds(&self, feature: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(feature)?;
        Ok(self.weights.iter().map(|w| dot(w, feature)).collect())
    }

    pub fn vote(&self, feature: &[f64]) -> Result<Vote, ModelError> {
        let log_odds = self.log_odds(feature)?;
        let probabilities = log_odds.iter().zip(&self.biases).map(|(z, b)| sigmoid(b + z)).collect();
        Ok(Vote { probabilities, log_odds })
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Prediction, ModelError> {
        let prior = self.prior();
        let per_evidence = features.iter().map(|f| self.log_odds(f)).collect::<Result<Vec<_>, _>>()?;
        let aggregate_log_odds = if features.is_empty() {
            vec![0.0; self.num_conditions()]
        } else {
            let mean = mean_feature(features, self.d);
            self.weights.iter().map(|w| dot(w, &mean)).collect()
        };
        let probabilities: Vec<f64> = aggregate_log_odds
            .iter()
            .zip(&self.biases)
            .map(|(z, b)| sigmoid(b + z))
            .collect();
        let relative_risk = probabilities.iter().zip(&prior).map(|(p, p0)| p / p0).collect();
        Ok(Prediction {
            probabilities,
            prior,
            aggregate_log_odds,
            per_evidence,
            relative_risk,
        })
    }

    /// Same weights, biases set from `new_prevalence`.
    pub fn recalibrate(&self, new_prevalence: &[f64]) -> Result<RiskModel, ModelError> {
        check_prevalence(&self.conditions, new_prevalence)?;
        let mut out = self.clone();
        out.biases = new_prevalence.iter().map(|&p| logit(p)).collect();
        Ok(out)
    }
}

/// Elementwise mean of `features`; zeros when empty.
pub fn mean_feature(features: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    if features.is_empty() {
        return mean;
    }
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    let n = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// One patient instance: encoded evidence plus multi-label targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    /// Snippets aligned with `features`; used for ranking tie-breaks.
    pub snippets: Vec<EvidenceSnippet>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        snippets: Vec<EvidenceSnippet>,
        features: Vec<Vec<f64>>,
        labels: Vec<bool>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if snippets.len() != features.len() {
            return Err(ModelError::Example {
                id,
                message: format!("{} snippets but {} feature vectors", snippets.len(), features.len()),
            });
        }
        Ok(Example {
            id,
            snippets,
            features,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub conditions: ConditionSet,
    pub d: usize,
    pub embedder_id: String,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub train_prevalence: Vec<f64>,
    #[serde(default)]
    pub training_config: Option<TrainConfig>,
    #[serde(default)]
    pub checkpoint_history: Vec<CheckpointRecord>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &RiskModel, config: Option<TrainConfig>, history: Vec<CheckpointRecord>) -> Self {
        ModelCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            conditions: model.conditions.clone(),
            d: model.d,
            embedder_id: model.embedder_id.clone(),
            weights: model.weights.clone(),
            biases: model.biases.clone(),
            train_prevalence: model.train_prevalence.clone(),
            training_config: config,
            checkpoint_history: history,
        }
    }

    pub fn model(&self) -> Result<RiskModel, ModelError> {
        let q = self.conditions.len();
        if self.biases.len() != q {
            return Err(ModelError::ConditionCount {
                expected: q,
                got: self.biases.len(),
            });
        }
        check_prevalence(&self.conditions, &self.train_prevalence)?;
        let base = RiskModel {
            conditions: self.conditions.clone(),
            weights: vec![vec![0.0; self.d]; q],
            biases: self.biases.clone(),
            train_prevalence: self.train_prevalence.clone(),
            embedder_id: self.embedder_id.clone(),
            d: self.d,
        };
        base.with_weights(self.weights.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let body = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(path, body + "\n").map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let err = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ckpt: ModelCheckpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(err(format!("unsupported format_version {}", ckpt.format_version)));
        }
        Ok(ckpt)
    }
}
