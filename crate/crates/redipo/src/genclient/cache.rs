//! Embedding cache keyed by (model name, content hash).
//!
//! Diversity scoring reuses each embedding against every other response in
//! its pool, and reruns hit the same texts again; the cache is persisted as
//! a JSONL sidecar so a resumed run issues no repeat requests.

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::jsonl::{read_jsonl, write_jsonl, JsonlError, JsonlRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    vector: Vec<f64>,
}

impl JsonlRecord for CacheEntry {}

/// Concurrent map from cache key to unit-norm embedding vector.
#[derive(Default)]
pub struct EmbeddingCache {
    map: RwLock<HashMap<String, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.map.read().get(key).cloned()
    }

    pub fn insert(&self, key: String, vector: Vec<f64>) {
        self.map.write().insert(key, vector);
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        let entries: Vec<CacheEntry> = read_jsonl(path)?;
        let map = entries.into_iter().map(|e| (e.key, e.vector)).collect();
        Ok(EmbeddingCache {
            map: RwLock::new(map),
        })
    }

    /// Writes entries sorted by key so the sidecar is byte-stable.
    pub fn save(&self, path: &Path) -> Result<usize, JsonlError> {
        let map = self.map.read();
        let mut entries: Vec<CacheEntry> = map
            .iter()
            .map(|(k, v)| CacheEntry {
                key: k.clone(),
                vector: v.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        write_jsonl(&entries, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn save_and_load_round_trip() {
        let cache = EmbeddingCache::new();
        cache.insert("m:abc".into(), vec![1.0, 0.0]);
        cache.insert("m:def".into(), vec![0.0, 1.0]);
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        assert_eq!(cache.save(&path).unwrap(), 2);
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.get("m:abc"), Some(vec![1.0, 0.0]));
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn save_is_deterministic_regardless_of_insert_order() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let c1 = EmbeddingCache::new();
        c1.insert("m:x".into(), vec![1.0]);
        c1.insert("m:y".into(), vec![2.0]);
        c1.save(&a).unwrap();
        let c2 = EmbeddingCache::new();
        c2.insert("m:y".into(), vec![2.0]);
        c2.insert("m:x".into(), vec![1.0]);
        c2.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
