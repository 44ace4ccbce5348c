//! Evidence ordering: mean squared log odds ratio plus the ablation orders.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::canonicalize;
use crate::evidence::EvidenceSnippet;
use crate::keyed::keyed_rng;
use crate::nam::{ModelError, RiskModel};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("confidence ranking needs token log-probabilities, but snippet {index} (report {report_id}) has none")]
    MissingConfidence { index: usize, report_id: String },
    #[error("random ranking needs a seed")]
    MissingSeed,
    #[error("log-odds ranking needs a model and one feature vector per snippet")]
    MissingModel,
    #[error("{snippets} snippets but {features} feature vectors")]
    Length { snippets: usize, features: usize },
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LogOdds,
    Confidence,
    ReverseChronological,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::LogOdds,
        Strategy::Confidence,
        Strategy::ReverseChronological,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LogOdds => "log_odds",
            Strategy::Confidence => "confidence",
            Strategy::ReverseChronological => "reverse_chronological",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RankError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEvidence {
    pub snippet: EvidenceSnippet,
    pub score: f64,
    pub strategy: Strategy,
    /// 1-based.
    pub rank: usize,
    /// Position of the snippet in the input list.
    pub source_index: usize,
    pub duplicate_of: Option<usize>,
}

/// Flat JSON Lines record for ranked output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub rank: usize,
    pub strategy: Strategy,
    pub score: f64,
    pub report_id: String,
    pub query: Option<String>,
    pub text: String,
    pub relative_day: i64,
    pub duplicate_of: Option<usize>,
}

impl RankedEvidence {
    pub fn record(&self) -> RankedRecord {
        RankedRecord {
            rank: self.rank,
            strategy: self.strategy,
            score: self.score,
            report_id: self.snippet.report_id.clone(),
            query: self.snippet.query.as_ref().map(|q| q.term.clone()),
            text: self.snippet.text.clone(),
            relative_day: self.snippet.relative_day,
            duplicate_of: self.duplicate_of,
        }
    }
}

/// `(1/Q) Σ_i (w_i · f)²`.
pub fn mse_score(model: &RiskModel, feature: &[f64]) -> Result<f64, ModelError> {
    let votes = model.log_odds(feature)?;
    Ok(votes.iter().map(|v| v * v).sum::<f64>() / votes.len() as f64)
}

/// Tie-break: most recent first, then report id, then query term.
pub fn canonical_order(a: &EvidenceSnippet, b: &EvidenceSnippet) -> Ordering {
    b.relative_day
        .cmp(&a.relative_day)
        .then_with(|| a.report_id.cmp(&b.report_id))
        .then_with(|| a.query_term().cmp(b.query_term()))
}

/// Orders `snippets` by descending strategy score with the canonical
/// tie-break; equal keys keep input order. `features` and `model` are only
/// consulted for [`Strategy::LogOdds`], `seed` only for [`Strategy::Random`].
pub fn rank(
    snippets: &[EvidenceSnippet],
    features: Option<&[Vec<f64>]>,
    model: Option<&RiskModel>,
    strategy: Strategy,
    seed: Option<u64>,
) -> Result<Vec<RankedEvidence>, RankError> {
    let scores: Vec<f64> = match strategy {
        Strategy::LogOdds => {
            let (Some(features), Some(model)) = (features, model) else {
                return Err(RankError::MissingModel);
            };
            if features.len() != snippets.len() {
                return Err(RankError::Length {
                    snippets: snippets.len(),
                    features: features.len(),
                });
            }
            features
                .iter()
                .map(|f| mse_score(model, f))
                .collect::<Result<_, _>>()?
        }
        Strategy::Confidence => snippets
            .iter()
            .enumerate()
            .map(|(index, s)| {
                s.confidence.ok_or_else(|| RankError::MissingConfidence {
                    index,
                    report_id: s.report_id.clone(),
                })
            })
            .collect::<Result<_, _>>()?,
        Strategy::ReverseChronological => snippets.iter().map(|s| s.relative_day as f64).collect(),
        Strategy::Random => {
            let seed = seed.ok_or(RankError::MissingSeed)?;
            // draw one key per snippet in canonical order so the shuffle does
            // not depend on input order
            let mut canonical: Vec<usize> = (0..snippets.len()).collect();
            canonical.sort_by(|&a, &b| canonical_order(&snippets[a], &snippets[b]));
            let mut rng = keyed_rng(seed, "rank.random", "");
            let mut keys = vec![0.0; snippets.len()];
            for i in canonical {
                keys[i] = rng.random::<f64>();
            }
            keys
        }
    };
    let mut order: Vec<usize> = (0..snippets.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| canonical_order(&snippets[a], &snippets[b]))
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, i)| RankedEvidence {
            snippet: snippets[i].clone(),
            score: scores[i],
            strategy,
            rank: pos + 1,
            source_index: i,
            duplicate_of: None,
        })
        .collect())
}

fn dedup_key(text: &str) -> String {
    canonicalize(text).to_lowercase()
}

/// Flags later snippets whose case- and whitespace-normalized text equals an
/// earlier one; `duplicate_of` is the rank of the first occurrence.
pub fn mark_duplicates(ranked: &mut [RankedEvidence]) {
    let mut first: HashMap<String, usize> = HashMap::new();
    for r in ranked.iter_mut() {
        let key = dedup_key(&r.snippet.text);
        match first.get(&key) {
            Some(&rank) => r.duplicate_of = Some(rank),
            None => {
                first.insert(key, r.rank);
                r.duplicate_of = None;
            }
        }
    }
}
