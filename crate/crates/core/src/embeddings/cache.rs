//! Concurrent, file-backed embedding cache.
//!
//! Keyed by `(provider_id, content hash)` so repeated runs are free and
//! providers that are not deterministic become deterministic behind it.
//! Reads take a shared lock; only misses take the write lock and append to
//! the cache file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedContent, EmbedError, EmbeddingProvider, EmbeddingVector, Modality};

#[derive(Debug, Serialize, Deserialize)]
struct CacheRow {
    provider_id: String,
    content_hash: String,
    values: Vec<f64>,
}

pub struct CachedProvider<P> {
    inner: P,
    entries: RwLock<HashMap<String, Vec<f64>>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    /// In-memory cache only.
    pub fn in_memory(inner: P) -> Self {
        CachedProvider { inner, entries: RwLock::new(HashMap::new()), writer: None, path: None }
    }

    /// Cache backed by a JSONL file shared across providers; rows belonging
    /// to other provider ids are ignored on load and preserved on append.
    pub fn with_file(inner: P, path: &Path) -> Result<Self, EmbedError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path)?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRow>(&line) {
                    Ok(row) if row.provider_id == inner.provider_id() => {
                        entries.insert(row.content_hash, row.values);
                    }
                    Ok(_) => {}
                    Err(err) => {
                        log::warn!("skipping malformed embedding cache line: {err}");
                    }
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CachedProvider {
            inner,
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn cache_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn content_hash(content: &EmbedContent<'_>) -> String {
        let mut hasher = Sha256::new();
        match content {
            EmbedContent::Text(text) => {
                hasher.update(b"t:");
                hasher.update(text.as_bytes());
            }
            EmbedContent::ImageBytes(bytes) => {
                hasher.update(b"i:");
                hasher.update(bytes);
            }
        }
        hex::encode(hasher.finalize())
    }

    fn persist(&self, content_hash: &str, values: &[f64]) -> Result<(), EmbedError> {
        if let Some(writer) = &self.writer {
            let row = CacheRow {
                provider_id: self.inner.provider_id().to_string(),
                content_hash: content_hash.to_string(),
                values: values.to_vec(),
            };
            let mut guard = writer.lock().expect("cache writer poisoned");
            serde_json::to_writer(&mut *guard, &row)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
            guard.write_all(b"\n")?;
            guard.flush()?;
        }
        Ok(())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn modality(&self) -> Modality {
        self.inner.modality()
    }

    fn shared_space(&self) -> Option<&str> {
        self.inner.shared_space()
    }

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector, EmbedError> {
        let key = Self::content_hash(content);
        if let Some(values) = self.entries.read().expect("cache lock poisoned").get(&key) {
            return EmbeddingVector::new(
                self.inner.provider_id().to_string(),
                self.inner.modality(),
                values.clone(),
            );
        }
        let vector = self.inner.embed(content)?;
        {
            let mut guard = self.entries.write().expect("cache lock poisoned");
            guard.entry(key.clone()).or_insert_with(|| vector.values().to_vec());
        }
        self.persist(&key, vector.values())?;
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingProvider {
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for CountingProvider {
        fn provider_id(&self) -> &str {
            "counting"
        }
        fn dimension(&self) -> usize {
            2
        }
        fn modality(&self) -> Modality {
            Modality::Text
        }
        fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let len = match content {
                EmbedContent::Text(t) => t.len(),
                EmbedContent::ImageBytes(b) => b.len(),
            };
            EmbeddingVector::new("counting", Modality::Text, vec![len as f64, 1.0])
        }
    }

    #[test]
    fn repeated_embeds_hit_the_cache() {
        let cached = CachedProvider::in_memory(CountingProvider { calls: AtomicUsize::new(0) });
        let a = cached.embed(&EmbedContent::Text("hello")).unwrap();
        let b = cached.embed(&EmbedContent::Text("hello")).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
        cached.embed(&EmbedContent::Text("other")).unwrap();
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn file_cache_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cached = CachedProvider::with_file(
                CountingProvider { calls: AtomicUsize::new(0) },
                &path,
            )
            .unwrap();
            cached.embed(&EmbedContent::Text("hello")).unwrap();
            assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
        }
        let cached =
            CachedProvider::with_file(CountingProvider { calls: AtomicUsize::new(0) }, &path)
                .unwrap();
        cached.embed(&EmbedContent::Text("hello")).unwrap();
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 0);
    }
}
