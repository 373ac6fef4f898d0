//! Persistent request cache keyed by a digest of the canonicalized request.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    ChatProvider, EmbeddingProvider, ProviderError, ProviderKind, SearchProvider, SearchResult, VerifierProvider,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProviderRequestKey {
    pub provider_kind: ProviderKind,
    pub payload_digest: String,
}

impl ProviderRequestKey {
    /// `backend` is the provider's identity string; it is part of the
    /// digest so two models never share entries.
    pub fn new(kind: ProviderKind, backend: &str, request: &Value) -> Self {
        let payload = json!({"kind": kind.as_str(), "backend": backend, "request": request});
        let canonical = canonical_json(&payload);
        Self { provider_kind: kind, payload_digest: hex::encode(Sha256::digest(canonical.as_bytes())) }
    }
}

/// Serializes with object keys sorted and free-text whitespace collapsed.
pub fn canonical_json(v: &Value) -> String {
    fn walk(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    walk(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    walk(item, out);
                }
                out.push(']');
            }
            Value::String(s) => {
                let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
                out.push_str(&Value::String(collapsed).to_string());
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    walk(v, &mut out);
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: ProviderRequestKey,
    response: Value,
    created_at: u64,
}

/// One JSON file per key under `<dir>/<kind>/<digest>.json`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &ProviderRequestKey) -> PathBuf {
        self.dir.join(key.provider_kind.as_str()).join(format!("{}.json", key.payload_digest))
    }

    /// Corrupt or mismatched entries are evicted and reported as a miss.
    pub fn get(&self, key: &ProviderRequestKey) -> Option<Value> {
        let path = self.path_for(key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == *key => Some(entry.response),
            _ => {
                tracing::warn!(path = %path.display(), "evicting corrupt cache entry");
                let _ = std::fs::remove_file(&path);
                None
            }
        }
    }

    /// Write-then-rename, so readers never observe a partial entry.
    pub fn put(&self, key: &ProviderRequestKey, response: Value) -> std::io::Result<()> {
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent)?;
        let entry = CacheEntry {
            key: key.clone(),
            response,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        serde_json::to_writer(&mut tmp, &entry)?;
        tmp.flush()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    fn through<T, F>(&self, kind: ProviderKind, backend: &str, request: Value, call: F) -> Result<T, ProviderError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, ProviderError>,
    {
        let key = ProviderRequestKey::new(kind, backend, &request);
        if let Some(hit) = self.get(&key) {
            match serde_json::from_value(hit) {
                Ok(v) => return Ok(v),
                Err(_) => {
                    let _ = std::fs::remove_file(self.path_for(&key));
                }
            }
        }
        let value = call()?;
        if let Err(e) = self.put(&key, serde_json::to_value(&value).expect("response serializes")) {
            tracing::warn!(error = %e, "cache write failed");
        }
        Ok(value)
    }
}

/// Serves repeated requests from a [`DiskCache`]; errors are never cached.
pub struct CachedProvider<P> {
    inner: P,
    cache: DiskCache,
}

impl<P> CachedProvider<P> {
    pub fn new(inner: P, cache: DiskCache) -> Self {
        Self { inner, cache }
    }
}

impl<P: ChatProvider> ChatProvider for CachedProvider<P> {
    fn complete(&self, prompt: &str, json_mode: bool) -> Result<String, ProviderError> {
        let request = json!({"prompt": prompt, "json_mode": json_mode});
        self.cache
            .through(ProviderKind::Chat, &self.inner.identity(), request, || self.inner.complete(prompt, json_mode))
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let request = json!({ "texts": texts });
        self.cache.through(ProviderKind::Embedding, &self.inner.identity(), request, || self.inner.embed(texts))
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: VerifierProvider> VerifierProvider for CachedProvider<P> {
    fn score(&self, claim: &str, evidence: &str) -> Result<f64, ProviderError> {
        let request = json!({"claim": claim, "evidence": evidence});
        self.cache
            .through(ProviderKind::Verifier, &self.inner.identity(), request, || self.inner.score(claim, evidence))
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: SearchProvider> SearchProvider for CachedProvider<P> {
    fn search(
        &self,
        query: &str,
        limit: usize,
        site_hints: Option<&[String]>,
    ) -> Result<Vec<SearchResult>, ProviderError> {
        let request = json!({"query": query, "limit": limit, "site_hints": site_hints});
        self.cache.through(ProviderKind::Search, &self.inner.identity(), request, || {
            self.inner.search(query, limit, site_hints)
        })
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}
