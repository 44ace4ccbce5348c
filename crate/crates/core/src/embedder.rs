//! Frozen text embedders.
//!
//! The additive model consumes a fixed feature map `text -> R^d` and label
//! normalization needs a similarity embedding. Both sit behind [`Embedder`].
//! The built-in [`HashingEmbedder`] hashes lowercase word unigrams and bigrams
//! into signed buckets; [`RemoteEmbedder`] delegates to an HTTP service so a
//! transformer encoder can be dropped in.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const URL_ENV: &str = "EVIDENT_EMBED_URL";
pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_SIMILARITY_DIM: usize = 128;
const DEFAULT_HASH_SEED: u64 = 0x005e_ed0f_e71d;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("embedder transport failure: {0}")]
    Transport(String),
    #[error("no embedding known for `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub embedder_id: String,
    pub dimension: usize,
    pub normalized: bool,
}

pub trait Embedder: Send + Sync {
    fn spec(&self) -> &EmbeddingSpec;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn id(&self) -> &str {
        &self.spec().embedder_id
    }

    fn dimension(&self) -> usize {
        self.spec().dimension
    }
}

/// Trims and collapses internal whitespace runs to a single space.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    // final avalanche so the sign bit depends on every input byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Signed feature hashing of word unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    spec: EmbeddingSpec,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self::with_seed(dimension, DEFAULT_HASH_SEED)
    }

    pub fn with_seed(dimension: usize, seed: u64) -> Self {
        assert!(dimension >= 2, "embedding dimension must be at least 2");
        HashingEmbedder {
            spec: EmbeddingSpec {
                embedder_id: format!("hashing-v1-d{dimension}-s{seed:x}"),
                dimension,
                normalized: true,
            },
            seed,
        }
    }

    pub fn features() -> Self {
        Self::new(DEFAULT_FEATURE_DIM)
    }

    pub fn similarity() -> Self {
        Self::new(DEFAULT_SIMILARITY_DIM)
    }

    fn add(&self, v: &mut [f64], token: &str) {
        let h = fnv1a(self.seed, token.as_bytes());
        let bucket = (h % v.len() as u64) as usize;
        v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
}

impl Embedder for HashingEmbedder {
    fn spec(&self) -> &EmbeddingSpec {
        &self.spec
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let canonical = canonicalize(text);
        if canonical.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let lower = canonical.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut v = vec![0.0; self.spec.dimension];
        for w in &words {
            self.add(&mut v, w);
        }
        for pair in words.windows(2) {
            self.add(&mut v, &format!("{} {}", pair[0], pair[1]));
        }
        if v.iter().all(|x| *x == 0.0) {
            // no tokens survived (or they cancelled): fall back to the whole string
            self.add(&mut v, &format!("\u{0}{lower}"));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Fixed lookup table, keyed by canonicalized text. Mostly useful in tests.
#[derive(Debug, Clone)]
pub struct StaticEmbedder {
    spec: EmbeddingSpec,
    table: HashMap<String, Vec<f64>>,
}

impl StaticEmbedder {
    pub fn new(id: &str, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self, EmbedError> {
        let table: HashMap<String, Vec<f64>> = entries.into_iter().map(|(k, v)| (canonicalize(&k), v)).collect();
        let dimension = table.values().next().map(Vec::len).unwrap_or(2);
        if let Some(bad) = table.values().find(|v| v.len() != dimension) {
            return Err(EmbedError::Dimension {
                expected: dimension,
                got: bad.len(),
            });
        }
        Ok(StaticEmbedder {
            spec: EmbeddingSpec {
                embedder_id: id.to_string(),
                dimension,
                normalized: false,
            },
            table,
        })
    }
}

impl Embedder for StaticEmbedder {
    fn spec(&self) -> &EmbeddingSpec {
        &self.spec
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let key = canonicalize(text);
        if key.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.table.get(&key).cloned().ok_or(EmbedError::Unknown(key))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST {base}/embed` with `{texts}` returning `{vectors}`.
pub struct RemoteEmbedder {
    spec: EmbeddingSpec,
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, dimension: usize, normalized: bool, timeout: Duration) -> Self {
        let base = base_url.trim_end_matches('/');
        RemoteEmbedder {
            spec: EmbeddingSpec {
                embedder_id: format!("remote:{base}:d{dimension}"),
                dimension,
                normalized,
            },
            endpoint: format!("{base}/embed"),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }

    pub fn from_env(dimension: usize, normalized: bool, timeout: Duration) -> Result<Self, EmbedError> {
        let url = std::env::var(URL_ENV).map_err(|_| EmbedError::Transport(format!("{URL_ENV} is not set")))?;
        Ok(RemoteEmbedder::new(&url, dimension, normalized, timeout))
    }
}

impl Embedder for RemoteEmbedder {
    fn spec(&self) -> &EmbeddingSpec {
        &self.spec
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop().ok_or_else(|| EmbedError::Transport("empty response".into()))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let texts: Vec<String> = texts.iter().map(|t| canonicalize(t)).collect();
        if texts.iter().any(String::is_empty) {
            return Err(EmbedError::EmptyText);
        }
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts: &texts })
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let parsed: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Transport(format!("malformed response: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(EmbedError::Transport(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                parsed.vectors.len()
            )));
        }
        for v in &parsed.vectors {
            if v.len() != self.spec.dimension {
                return Err(EmbedError::Dimension {
                    expected: self.spec.dimension,
                    got: v.len(),
                });
            }
        }
        Ok(parsed.vectors)
    }
}
