//! Digest-keyed response cache.
//!
//! Responses are stored one file per request digest under
//! `<dir>/<digest[0..2]>/<digest>.json`. Writes go through a temp file and
//! an atomic rename so concurrent writers of the same key are safe.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Backend, BackendError, ChatRequest, ChatResponse};

/// Caching wrapper: returns the stored response on a digest hit without
/// calling the inner backend.
pub struct CachingBackend<'a> {
    inner: &'a dyn Backend,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<'a> CachingBackend<'a> {
    pub fn new(inner: &'a dyn Backend, dir: impl Into<PathBuf>) -> Self {
        CachingBackend {
            inner,
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        let shard = digest.get(0..2).unwrap_or("xx");
        self.dir.join(shard).join(format!("{digest}.json"))
    }

    fn load(&self, path: &Path) -> Option<ChatResponse> {
        let bytes = fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn store(&self, path: &Path, response: &ChatResponse) -> Result<(), BackendError> {
        let parent = path.parent().expect("cache entry path has a parent");
        fs::create_dir_all(parent)
            .map_err(|e| BackendError::Transport(format!("cache dir: {e}")))?;
        let tmp = parent.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.hits.load(Ordering::Relaxed) + self.misses.load(Ordering::Relaxed)
        ));
        let bytes = serde_json::to_vec_pretty(response).expect("response serializes");
        fs::write(&tmp, bytes).map_err(|e| BackendError::Transport(format!("cache write: {e}")))?;
        fs::rename(&tmp, path)
            .map_err(|e| BackendError::Transport(format!("cache rename: {e}")))?;
        Ok(())
    }
}

impl Backend for CachingBackend<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let path = self.entry_path(&request.request_digest);
        if let Some(mut cached) = self.load(&path) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            cached.cached = true;
            return Ok(cached);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        self.store(&path, &response)?;
        Ok(response)
    }
}
