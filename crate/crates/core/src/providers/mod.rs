//! Provider contracts for the four external capabilities the pipeline
//! consumes (chat, embedding, verifier, search), plus offline, HTTP and
//! cached implementations.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod cache;
pub mod http;
pub mod offline;

pub use cache::{CachedProvider, DiskCache, ProviderRequestKey};
pub use http::{HttpChat, HttpClient, HttpEmbedder, HttpSearch, HttpVerifier, RetryPolicy, Transport, UreqTransport};
pub use offline::{
    FixtureSearch, HashEmbedder, LexicalVerifier, OfflineChat, RuleVerifier, ScriptedChat, VerifierRule,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidInput(String),
    #[error("scripted provider exhausted")]
    Exhausted,
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Chat,
    Embedding,
    Verifier,
    Search,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Chat => "chat",
            ProviderKind::Embedding => "embedding",
            ProviderKind::Verifier => "verifier",
            ProviderKind::Search => "search",
        }
    }
}

/// One web search hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, prompt: &str, json_mode: bool) -> Result<String, ProviderError>;
    /// Backend identity used in cache keys, e.g. `"http:gpt-4o@https://api..."`.
    fn identity(&self) -> String;
}

pub trait EmbeddingProvider: Send + Sync {
    /// One vector per input, order preserved.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
    fn identity(&self) -> String;
}

pub trait VerifierProvider: Send + Sync {
    /// Probability that `evidence` supports `claim`.
    fn score(&self, claim: &str, evidence: &str) -> Result<f64, ProviderError>;
    fn identity(&self) -> String;
}

pub trait SearchProvider: Send + Sync {
    fn search(
        &self,
        query: &str,
        limit: usize,
        site_hints: Option<&[String]>,
    ) -> Result<Vec<SearchResult>, ProviderError>;
    fn identity(&self) -> String;
}

pub(crate) fn check_embed_input(texts: &[String]) -> Result<(), ProviderError> {
    if texts.is_empty() {
        return Err(ProviderError::InvalidInput("empty embedding batch".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(ProviderError::InvalidInput(format!("empty text at batch index {i}")));
    }
    Ok(())
}

pub(crate) fn check_verifier_input(claim: &str, evidence: &str) -> Result<(), ProviderError> {
    if claim.trim().is_empty() || evidence.trim().is_empty() {
        return Err(ProviderError::InvalidInput("verifier claim and evidence must be nonempty".into()));
    }
    Ok(())
}

/// Lowercased alphanumeric tokens; every run of non-alphanumeric characters
/// is a separator.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Per-kind request counters.
#[derive(Debug, Default)]
pub struct RequestCounter {
    counts: [AtomicUsize; 4],
}

impl RequestCounter {
    fn slot(kind: ProviderKind) -> usize {
        match kind {
            ProviderKind::Chat => 0,
            ProviderKind::Embedding => 1,
            ProviderKind::Verifier => 2,
            ProviderKind::Search => 3,
        }
    }

    pub fn bump(&self, kind: ProviderKind) {
        self.counts[Self::slot(kind)].fetch_add(1, Ordering::SeqCst);
    }

    pub fn get(&self, kind: ProviderKind) -> usize {
        self.counts[Self::slot(kind)].load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> RequestCounts {
        RequestCounts {
            chat: self.get(ProviderKind::Chat),
            embedding: self.get(ProviderKind::Embedding),
            verifier: self.get(ProviderKind::Verifier),
            search: self.get(ProviderKind::Search),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub chat: usize,
    pub embedding: usize,
    pub verifier: usize,
    pub search: usize,
}

/// The provider set one pipeline run uses. Every call made through
/// these accessors is counted per kind.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embedding: Option<Arc<dyn EmbeddingProvider>>,
    pub verifier: Arc<dyn VerifierProvider>,
    pub search: Option<Arc<dyn SearchProvider>>,
    counter: Arc<RequestCounter>,
}

impl Providers {
    pub fn new(
        chat: Arc<dyn ChatProvider>,
        embedding: Option<Arc<dyn EmbeddingProvider>>,
        verifier: Arc<dyn VerifierProvider>,
        search: Option<Arc<dyn SearchProvider>>,
    ) -> Self {
        Self { chat, embedding, verifier, search, counter: Arc::default() }
    }

    /// Offline defaults: rule-based chat, hash embeddings, lexical verifier, no search.
    pub fn offline() -> Self {
        Self::new(
            Arc::new(OfflineChat::default()),
            Some(Arc::new(HashEmbedder::default())),
            Arc::new(LexicalVerifier),
            None,
        )
    }

    pub fn with_search(mut self, search: Arc<dyn SearchProvider>) -> Self {
        self.search = Some(search);
        self
    }

    pub fn requests(&self) -> RequestCounts {
        self.counter.snapshot()
    }

    pub fn chat(&self) -> Counted<'_, dyn ChatProvider> {
        Counted::new(self.chat.as_ref(), &self.counter)
    }

    pub fn embedding(&self) -> Option<Counted<'_, dyn EmbeddingProvider>> {
        self.embedding.as_deref().map(|e| Counted::new(e, &self.counter))
    }

    pub fn verifier(&self) -> Counted<'_, dyn VerifierProvider> {
        Counted::new(self.verifier.as_ref(), &self.counter)
    }

    pub fn search(&self) -> Option<Counted<'_, dyn SearchProvider>> {
        self.search.as_deref().map(|s| Counted::new(s, &self.counter))
    }
}

/// Borrowed provider that bumps a shared counter on each call.
pub struct Counted<'a, P: ?Sized> {
    inner: &'a P,
    counter: &'a RequestCounter,
}

impl<'a, P: ?Sized> Counted<'a, P> {
    fn new(inner: &'a P, counter: &'a RequestCounter) -> Self {
        Self { inner, counter }
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Counted<'_, P> {
    fn complete(&self, prompt: &str, json_mode: bool) -> Result<String, ProviderError> {
        self.counter.bump(ProviderKind::Chat);
        self.inner.complete(prompt, json_mode)
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Counted<'_, P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.counter.bump(ProviderKind::Embedding);
        self.inner.embed(texts)
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: VerifierProvider + ?Sized> VerifierProvider for Counted<'_, P> {
    fn score(&self, claim: &str, evidence: &str) -> Result<f64, ProviderError> {
        self.counter.bump(ProviderKind::Verifier);
        self.inner.score(claim, evidence)
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: SearchProvider + ?Sized> SearchProvider for Counted<'_, P> {
    fn search(
        &self,
        query: &str,
        limit: usize,
        site_hints: Option<&[String]>,
    ) -> Result<Vec<SearchResult>, ProviderError> {
        self.counter.bump(ProviderKind::Search);
        self.inner.search(query, limit, site_hints)
    }
    fn identity(&self) -> String {
        self.inner.identity()
    }
}
