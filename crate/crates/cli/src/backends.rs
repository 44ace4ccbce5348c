use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use evident_core::embedder::{Embedder, HashingEmbedder, RemoteEmbedder, DEFAULT_FEATURE_DIM};
use evident_core::llm::{Backend, CachedBackend, MockBackend, RemoteBackend};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Fixture-driven deterministic backend.
    Mock,
    /// HTTP completion endpoint named by EVIDENT_LLM_URL.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    /// Built-in feature-hashing embedder.
    Hashing,
    /// HTTP embedding endpoint named by EVIDENT_EMBED_URL.
    Remote,
}

/// Completion backend and embedder selection shared by subcommands.
#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Fixture file for the mock backend.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Directory caching completions on disk.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Generation budget for the remote backend.
    #[arg(long, default_value_t = evident_core::llm::DEFAULT_MAX_TOKENS)]
    pub max_tokens: u32,
    #[arg(long, value_enum, default_value = "hashing")]
    pub embedder: EmbedderKind,
    /// Feature dimension (remote embedder only).
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    pub embed_dim: usize,
    /// Request timeout for remote backends.
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

impl BackendArgs {
    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn gateway(&self) -> Result<Arc<dyn Backend>, Failure> {
        let inner: Arc<dyn Backend> = match self.backend {
            BackendKind::Mock => {
                let path = self
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| Failure::usage("--backend mock needs --fixtures"))?;
                Arc::new(MockBackend::load(path)?)
            }
            BackendKind::Remote => {
                Arc::new(RemoteBackend::from_env(self.timeout())?.with_max_tokens(self.max_tokens))
            }
        };
        Ok(match &self.cache_dir {
            Some(dir) => Arc::new(CachedBackend::new(inner, dir.clone())?),
            None => inner,
        })
    }

    /// Embedder for model features.
    pub fn features(&self) -> Result<Arc<dyn Embedder>, Failure> {
        Ok(match self.embedder {
            EmbedderKind::Hashing => Arc::new(HashingEmbedder::features()),
            EmbedderKind::Remote => Arc::new(RemoteEmbedder::from_env(self.embed_dim, true, self.timeout())?),
        })
    }

    /// Embedder for matching diagnostic terms to conditions.
    pub fn similarity(&self) -> Result<Arc<dyn Embedder>, Failure> {
        Ok(match self.embedder {
            EmbedderKind::Hashing => Arc::new(HashingEmbedder::similarity()),
            EmbedderKind::Remote => Arc::new(RemoteEmbedder::from_env(self.embed_dim, true, self.timeout())?),
        })
    }
}
