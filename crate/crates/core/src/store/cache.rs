//! Content-addressed embedding cache.
//!
//! Keys are `(sha256 of content bytes, embedder id)`. Stored vectors are unit
//! normalized. The on-disk layout fans out on the first two hash bytes:
//! `<root>/<embedder>/<h0h1>/<h2h3>/<hash>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{normalize, Embedding};
use crate::error::Result;

/// Name of the content hash, recorded in manifest headers.
pub const CONTENT_HASH_ALGORITHM: &str = "sha256";

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an embedding's canonical serialization (little-endian f64s).
pub fn embedding_content_hash(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    content_hash: String,
    embedder_id: String,
    embedding: Embedding,
}

#[derive(Debug)]
pub struct EmbeddingCache {
    enabled: bool,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<(String, String), Embedding>>,
    hits: AtomicU64,
    misses: AtomicU64,
    tmp_counter: AtomicU64,
}

impl EmbeddingCache {
    fn build(enabled: bool, dir: Option<PathBuf>) -> Self {
        EmbeddingCache {
            enabled,
            dir,
            memory: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn in_memory() -> Self {
        Self::build(true, None)
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self::build(true, Some(dir)))
    }

    /// Every lookup misses and nothing is stored; values are still normalized.
    pub fn disabled() -> Self {
        Self::build(false, None)
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    fn entry_path(dir: &Path, hash: &str, embedder: &str) -> PathBuf {
        let safe: String = embedder
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
            .collect();
        dir.join(safe)
            .join(&hash[0..2])
            .join(&hash[2..4])
            .join(format!("{hash}.json"))
    }

    pub fn lookup(&self, content: &[u8], embedder: &str) -> Result<Option<Embedding>> {
        if !self.enabled {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return Ok(None);
        }
        let hash = content_hash(content);
        let key = (hash.clone(), embedder.to_string());
        if let Some(e) = self.memory.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(e.clone()));
        }
        if let Some(dir) = &self.dir {
            let path = Self::entry_path(dir, &hash, embedder);
            if let Ok(text) = fs::read_to_string(&path) {
                // Unreadable or mismatched entries count as misses and get rewritten.
                if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
                    if entry.content_hash == hash && entry.embedder_id == embedder {
                        self.memory
                            .write()
                            .unwrap_or_else(|e| e.into_inner())
                            .insert(key, entry.embedding.clone());
                        self.hits.fetch_add(1, Ordering::Relaxed);
                        return Ok(Some(entry.embedding));
                    }
                }
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(None)
    }

    /// Normalizes and stores `embedding`, returning the stored form.
    pub fn insert(&self, content: &[u8], embedder: &str, embedding: &Embedding) -> Result<Embedding> {
        let hash = content_hash(content);
        let stored = normalize(embedding)?.with_id(hash.clone());
        if !self.enabled {
            return Ok(stored);
        }
        if let Some(dir) = &self.dir {
            let path = Self::entry_path(dir, &hash, embedder);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let entry = CacheEntry {
                content_hash: hash.clone(),
                embedder_id: embedder.to_string(),
                embedding: stored.clone(),
            };
            let tmp = path.with_extension(format!(
                "tmp.{}.{}",
                std::process::id(),
                self.tmp_counter.fetch_add(1, Ordering::Relaxed)
            ));
            fs::write(&tmp, serde_json::to_vec(&entry)?)?;
            fs::rename(&tmp, &path)?;
        }
        self.memory
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert((hash, embedder.to_string()), stored.clone());
        Ok(stored)
    }

    /// Cached embedding of `content` under `embedder`, computing and storing
    /// it on a miss. A failed compute stores nothing.
    pub fn get_or_compute<F>(&self, content: &[u8], embedder: &str, compute: F) -> Result<Embedding>
    where
        F: FnOnce(&[u8]) -> Result<Embedding>,
    {
        if let Some(e) = self.lookup(content, embedder)? {
            return Ok(e);
        }
        let fresh = compute(content)?;
        self.insert(content, embedder, &fresh)
    }
}
