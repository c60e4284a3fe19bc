use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use super::{Backend, BackendError, GenerationRequest, GenerationResponse};

/// Response cache keyed by [`GenerationRequest::digest`].
///
/// Entries live in memory and, when a directory is configured, as one JSON
/// file per digest. Hits never reach the wrapped backend. Reads may run
/// concurrently; disk writes are serialized.
pub struct CachedBackend<B> {
    inner: B,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, GenerationResponse>>,
    write_lock: Mutex<()>,
}

impl<B: Backend> CachedBackend<B> {
    pub fn in_memory(inner: B) -> Self {
        Self {
            inner,
            dir: None,
            memory: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    pub fn on_disk(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| cache_err(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::in_memory(inner)
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn entry_path(&self, digest: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{digest}.json")))
    }

    fn lookup(&self, digest: &str) -> Result<Option<GenerationResponse>, BackendError> {
        if let Some(hit) = self.memory.read().expect("cache lock").get(digest) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.entry_path(digest) else {
            return Ok(None);
        };
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_err(&path, e)),
        };
        let response: GenerationResponse =
            serde_json::from_str(&text).map_err(|e| cache_err(&path, e))?;
        self.memory
            .write()
            .expect("cache lock")
            .insert(digest.to_string(), response.clone());
        Ok(Some(response))
    }

    fn store(&self, digest: &str, response: &GenerationResponse) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().expect("cache write lock");
        if let Some(path) = self.entry_path(digest) {
            let tmp = path.with_extension("json.tmp");
            let body = serde_json::to_string(response).expect("response serializes");
            fs::write(&tmp, body).map_err(|e| cache_err(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| cache_err(&path, e))?;
        }
        self.memory
            .write()
            .expect("cache lock")
            .insert(digest.to_string(), response.clone());
        Ok(())
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let digest = request.digest(self.inner.model_id());
        if let Some(mut hit) = self.lookup(&digest)? {
            hit.cached = true;
            hit.retries = 0;
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        self.store(&digest, &response)?;
        Ok(response)
    }
}
