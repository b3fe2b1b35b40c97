use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Backend, BackendError, CacheKey, ChatRequest, ChatResponse};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cache entry {path} is corrupt: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

/// One stored response. `digest` is the SHA-256 of `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub backend_id: String,
    pub text: String,
    pub digest: String,
}

impl CacheEntry {
    pub fn new(key: CacheKey, backend_id: &str, text: &str) -> Self {
        Self {
            key: key.hex(),
            backend_id: backend_id.to_string(),
            text: text.to_string(),
            digest: hex::encode(Sha256::digest(text.as_bytes())),
        }
    }
}

/// Content-addressed response store: one JSON file per key under
/// `dir/<first two hex chars>/<hex>.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| CacheError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hex = key.hex();
        self.dir.join(&hex[..2]).join(format!("{hex}.json"))
    }

    /// Returns the stored entry, or `None` on a miss.
    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(CacheError::Io { path, source }),
        };
        let corrupt = |detail: String| CacheError::Corrupt {
            path: path.clone(),
            detail,
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if entry.key != key.hex() {
            return Err(corrupt(format!("stored key {} does not match", entry.key)));
        }
        if hex::encode(Sha256::digest(entry.text.as_bytes())) != entry.digest {
            return Err(corrupt("text digest mismatch".into()));
        }
        Ok(Some(entry))
    }

    /// Writes the entry atomically: a temporary file in the same directory
    /// is renamed over the final path, so readers never see partial data.
    pub fn put(&self, key: &CacheKey, entry: &CacheEntry) -> Result<(), CacheError> {
        let path = self.path_for(key);
        let parent = path.parent().expect("entry path has a parent");
        let io_err = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(parent).map_err(io_err)?;
        let tmp = parent.join(format!(
            ".{}.{}.{}.tmp",
            key.hex(),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let body = serde_json::to_vec(entry).expect("cache entry serializes");
        let write = || -> io::Result<()> {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&body)?;
            file.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            io_err(e)
        })
    }
}

/// Serves repeated requests from a [`ResponseCache`] and records every new
/// response in it.
pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = self.key(request);
        let cache_err = |e: CacheError| BackendError::Cache {
            key,
            detail: e.to_string(),
        };
        if let Some(entry) = self.cache.get(&key).map_err(cache_err)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ChatResponse {
                text: entry.text,
                latency_ms: 0,
                backend_id: entry.backend_id,
                cached: true,
            });
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.send(request)?;
        self.cache
            .put(&key, &CacheEntry::new(key, self.inner.id(), &response.text))
            .map_err(cache_err)?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn key(n: u8) -> CacheKey {
        CacheKey([n; 32])
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert!(cache.get(&key(1)).unwrap().is_none());
        let entry = CacheEntry::new(key(1), "mock", "triangle");
        cache.put(&key(1), &entry).unwrap();
        assert_eq!(cache.get(&key(1)).unwrap(), Some(entry));
    }

    #[test]
    fn tampered_entry_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let mut entry = CacheEntry::new(key(2), "mock", "circle");
        cache.put(&key(2), &entry).unwrap();
        entry.text = "octagon".into();
        fs::write(cache.path_for(&key(2)), serde_json::to_vec(&entry).unwrap()).unwrap();
        assert!(matches!(cache.get(&key(2)), Err(CacheError::Corrupt { .. })));
        fs::write(cache.path_for(&key(2)), b"{not json").unwrap();
        assert!(matches!(cache.get(&key(2)), Err(CacheError::Corrupt { .. })));
    }

    #[test]
    fn concurrent_puts_same_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let handles: Vec<_> = (0..16)
            .map(|i| {
                let cache = Arc::clone(&cache);
                std::thread::spawn(move || {
                    for _ in 0..50 {
                        let entry = CacheEntry::new(key(3), "mock", &format!("answer {}", i % 2));
                        cache.put(&key(3), &entry).unwrap();
                        let got = cache.get(&key(3)).unwrap().unwrap();
                        assert!(got.text == "answer 0" || got.text == "answer 1");
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(cache.get(&key(3)).unwrap().is_some());
        let leftovers: Vec<_> = fs::read_dir(cache.path_for(&key(3)).parent().unwrap())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
