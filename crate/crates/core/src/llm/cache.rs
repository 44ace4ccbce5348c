use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{Backend, Completion, GatewayError};
use crate::keyed::content_hash;

const STRIPES: usize = 64;

/// Content-addressed on-disk cache in front of another backend.
///
/// Entries live at `<dir>/<sha256(backend_id, prompt)>.json`. Unreadable
/// entries are treated as misses and overwritten.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    stripes: Vec<Mutex<()>>,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Fixture(format!("cache dir {}: {e}", dir.display())))?;
        Ok(CachedBackend {
            inner,
            dir,
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
        })
    }

    pub fn key(&self, prompt: &str) -> String {
        content_hash(&[self.inner.id(), prompt])
    }

    pub fn entry_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", self.key(prompt)))
    }

    fn read(path: &Path) -> Option<Completion> {
        let bytes = fs::read(path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; recomputing", path.display());
                None
            }
        }
    }

    fn write(path: &Path, completion: &Completion) {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let result = fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&serde_json::to_vec(completion).expect("completion serializes")))
            .and_then(|_| fs::rename(&tmp, path));
        if let Err(e) = result {
            log::warn!("could not write cache entry {}: {e}", path.display());
            let _ = fs::remove_file(&tmp);
        }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        let key = self.key(prompt);
        let stripe = usize::from_str_radix(&key[..4], 16).expect("hex key") % STRIPES;
        let _guard = self.stripes[stripe].lock().expect("cache stripe");
        let path = self.dir.join(format!("{key}.json"));
        if let Some(hit) = Self::read(&path) {
            return Ok(hit);
        }
        let completion = self.inner.complete(prompt)?;
        Self::write(&path, &completion);
        Ok(completion)
    }
}
