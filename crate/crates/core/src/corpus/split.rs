use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};
use crate::keyed::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
    Annotation,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::Validation,
        SplitName::Test,
        SplitName::Annotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
            SplitName::Annotation => "annotation",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub annotation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            validation: 0.1,
            test: 0.1,
            annotation: 0.1,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 4] {
        [self.train, self.validation, self.test, self.annotation]
    }
}

/// Split file contents: split name → patient ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment(pub BTreeMap<SplitName, Vec<String>>);

impl SplitAssignment {
    pub fn ids(&self, name: SplitName) -> &[String] {
        self.0.get(&name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split_of(&self, patient_id: &str) -> Option<SplitName> {
        self.0
            .iter()
            .find(|(_, ids)| ids.iter().any(|id| id == patient_id))
            .map(|(name, _)| *name)
    }

    /// Checks that the splits partition `corpus`: no overlap, no unknown ids, full coverage.
    pub fn validate(&self, corpus: &Corpus) -> Result<(), CorpusError> {
        let known: BTreeSet<&str> = corpus.patients.iter().map(|p| p.patient_id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for (name, ids) in &self.0 {
            for id in ids {
                if !known.contains(id.as_str()) {
                    return Err(CorpusError::InvalidSplits(format!("{name} lists unknown patient `{id}`")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(CorpusError::InvalidSplits(format!("patient `{id}` appears in more than one split")));
                }
            }
        }
        if let Some(missing) = known.difference(&seen).next() {
            return Err(CorpusError::InvalidSplits(format!("patient `{missing}` is not assigned")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let body = serde_json::to_string_pretty(self).expect("splits serialize");
        fs::write(path, body + "\n").map_err(|e| CorpusError::io(path, e))
    }
}

/// Randomly partitions the corpus' patients by `fractions`.
pub fn assign_splits(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment, CorpusError> {
    let parts = fractions.as_array();
    if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidSplits(format!(
            "fractions {parts:?} must be non-negative and sum to 1"
        )));
    }
    let mut ids = corpus.patient_ids();
    ids.sort();
    ids.shuffle(&mut keyed_rng(seed, "assign_splits", ""));

    let n = ids.len();
    let mut out = BTreeMap::new();
    let mut cumulative = 0.0;
    let mut start = 0;
    for (i, name) in SplitName::ALL.into_iter().enumerate() {
        cumulative += parts[i];
        let end = if i == 3 { n } else { ((cumulative * n as f64).round() as usize).min(n) };
        out.insert(name, ids[start..end.max(start)].to_vec());
        start = end.max(start);
    }
    Ok(SplitAssignment(out))
}
