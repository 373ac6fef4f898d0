//! JSON run configuration and provider construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corroborate::{Allowlist, CorroborationSettings, DEFAULT_SEARCH_K, DEFAULT_WEB_QUERY_MAX_LEN};
use crate::evidence::DEFAULT_OVERLAP_SENTENCES;
use crate::metrics::NeiPolicy;
use crate::providers::offline::DEFAULT_HASH_DIM;
use crate::providers::{
    CachedProvider, ChatProvider, DiskCache, EmbeddingProvider, FixtureSearch, HashEmbedder, HttpChat, HttpClient,
    HttpEmbedder, HttpSearch, HttpVerifier, LexicalVerifier, OfflineChat, ProviderError, ProviderKind, Providers,
    RetryPolicy, RuleVerifier, ScriptedChat, SearchProvider, Transport, UreqTransport, VerifierProvider,
};
use crate::types::{Ablation, Regime, TaskMode, Thresholds};

pub const DEFAULT_PARALLELISM: usize = 8;
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ChatBackend {
    #[default]
    Offline,
    /// Replays responses from a JSON file.
    Scripted { path: PathBuf },
    /// OpenAI-compatible `/chat/completions`.
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum EmbeddingBackend {
    Hash {
        #[serde(default = "default_hash_dim")]
        dim: usize,
    },
    /// Disables embeddings; snippet selection uses token overlap.
    None,
    /// OpenAI-compatible `/embeddings`.
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_hash_dim() -> usize {
    DEFAULT_HASH_DIM
}

impl Default for EmbeddingBackend {
    fn default() -> Self {
        EmbeddingBackend::Hash { dim: DEFAULT_HASH_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum VerifierBackend {
    #[default]
    Lexical,
    Rules {
        path: PathBuf,
    },
    Http {
        url: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum SearchBackend {
    #[default]
    None,
    Fixture {
        path: PathBuf,
    },
    Http {
        url: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvidersConfig {
    pub chat: ChatBackend,
    pub embedding: EmbeddingBackend,
    pub verifier: VerifierBackend,
    pub search: SearchBackend,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub http_attempts: u32,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            chat: ChatBackend::default(),
            embedding: EmbeddingBackend::default(),
            verifier: VerifierBackend::default(),
            search: SearchBackend::default(),
            timeout_secs: 60,
            max_in_flight: crate::providers::http::DEFAULT_MAX_IN_FLIGHT,
            http_attempts: RetryPolicy::default().max_attempts,
        }
    }
}

/// Everything one run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub thresholds: Thresholds,
    pub allowlist: Option<Allowlist>,
    pub regime: Regime,
    pub ablation: Ablation,
    pub task: TaskMode,
    pub nei_policy: NeiPolicy,
    /// Repair retries for decomposition.
    pub retries: u32,
    /// Search results requested per fact.
    pub k: usize,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub overlap_sentences: usize,
    pub web_query_max_len: usize,
    /// Forward the allowlist to the search backend as site restrictions.
    pub site_hints: bool,
    pub providers: ProvidersConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            allowlist: None,
            regime: Regime::ContextOnly,
            ablation: Ablation::None,
            task: TaskMode::ThreeWay,
            nei_policy: NeiPolicy::CountAsError,
            retries: DEFAULT_RETRIES,
            k: DEFAULT_SEARCH_K,
            parallelism: DEFAULT_PARALLELISM,
            cache_dir: None,
            overlap_sentences: DEFAULT_OVERLAP_SENTENCES,
            web_query_max_len: DEFAULT_WEB_QUERY_MAX_LEN,
            site_hints: true,
            providers: ProvidersConfig::default(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "thresholds",
    "allowlist",
    "regime",
    "ablation",
    "task",
    "nei_policy",
    "retries",
    "k",
    "parallelism",
    "cache_dir",
    "overlap_sentences",
    "web_query_max_len",
    "site_hints",
    "providers",
];
const THRESHOLD_KEYS: &[&str] = &["lo", "hi", "max_fact_words", "max_chunk_chars"];
const PROVIDER_KEYS: &[&str] =
    &["chat", "embedding", "verifier", "search", "timeout_secs", "max_in_flight", "http_attempts"];
const BACKEND_KEYS: &[&str] = &["backend", "path", "base_url", "model", "url", "api_key_env", "dim"];

fn unknown_keys(v: &Value) -> Vec<String> {
    fn scan(v: &Value, prefix: &str, known: &[&str], out: &mut Vec<String>) {
        if let Some(obj) = v.as_object() {
            out.extend(obj.keys().filter(|k| !known.contains(&k.as_str())).map(|k| format!("{prefix}{k}")));
        }
    }
    let mut out = Vec::new();
    scan(v, "", TOP_KEYS, &mut out);
    scan(&v["thresholds"], "thresholds.", THRESHOLD_KEYS, &mut out);
    scan(&v["providers"], "providers.", PROVIDER_KEYS, &mut out);
    for kind in ["chat", "embedding", "verifier", "search"] {
        scan(&v["providers"][kind], &format!("providers.{kind}."), BACKEND_KEYS, &mut out);
    }
    out
}

impl PipelineConfig {
    /// Parses JSON text, filling defaults. Unknown keys are returned as
    /// warnings rather than rejected. Relative paths resolve against `base`.
    pub fn from_json_str(text: &str, base: Option<&Path>) -> Result<(Self, Vec<String>), ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        if !value.is_object() {
            return Err(ConfigError::Syntax("top level must be an object".into()));
        }
        let warnings = unknown_keys(&value);
        for w in &warnings {
            tracing::warn!(key = %w, "unknown config key ignored");
        }
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
            let key = e.path().to_string();
            invalid(&key, e.into_inner().to_string())
        })?;
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok((cfg, warnings))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(dir) = self.cache_dir.as_mut() {
            fix(dir);
        }
        if let ChatBackend::Scripted { path } = &mut self.providers.chat {
            fix(path);
        }
        if let VerifierBackend::Rules { path } = &mut self.providers.verifier {
            fix(path);
        }
        if let SearchBackend::Fixture { path } = &mut self.providers.search {
            fix(path);
        }
    }

    /// Checks cross-field invariants; call again after CLI overrides.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.thresholds.validate().map_err(|e| invalid("thresholds", e.to_string()))?;
        for (key, v) in
            [("k", self.k), ("parallelism", self.parallelism), ("web_query_max_len", self.web_query_max_len)]
        {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if self.providers.max_in_flight == 0 {
            return Err(invalid("providers.max_in_flight", "must be at least 1"));
        }
        if self.providers.http_attempts == 0 {
            return Err(invalid("providers.http_attempts", "must be at least 1"));
        }
        if let EmbeddingBackend::Hash { dim: 0 } = self.providers.embedding {
            return Err(invalid("providers.embedding.dim", "must be at least 1"));
        }
        if self.regime == Regime::ContextWeb {
            if self.allowlist.is_none() {
                return Err(invalid("allowlist", "required when regime is context-web"));
            }
            if self.providers.search == SearchBackend::None {
                return Err(invalid("providers.search", "a search backend is required when regime is context-web"));
            }
        }
        Ok(())
    }

    /// Corroboration settings; `None` outside the web regime.
    pub fn corroboration(&self) -> Option<CorroborationSettings> {
        if self.regime != Regime::ContextWeb {
            return None;
        }
        let allowlist = self.allowlist.clone()?;
        Some(CorroborationSettings {
            k: self.k,
            web_query_max_len: self.web_query_max_len,
            site_hints: self.site_hints,
            ..CorroborationSettings::new(allowlist, self.thresholds)
        })
    }
}

/// Reads and validates a config file, logging unknown keys.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    load_config_with_warnings(path).map(|(cfg, _)| cfg)
}

pub fn load_config_with_warnings(path: &Path) -> Result<(PipelineConfig, Vec<String>), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    PipelineConfig::from_json_str(&text, path.parent())
}

fn api_key(env: &Option<String>, key: &str) -> Result<Option<String>, ConfigError> {
    match env {
        None => Ok(None),
        Some(var) => {
            std::env::var(var).map(Some).map_err(|_| invalid(key, format!("environment variable {var} is not set")))
        }
    }
}

fn provider_err(key: &str) -> impl Fn(ProviderError) -> ConfigError + '_ {
    move |e| invalid(key, e.to_string())
}

/// Builds providers over the real network transport.
pub fn build_providers(cfg: &PipelineConfig) -> Result<Providers, ConfigError> {
    let transport = Arc::new(UreqTransport::new(Duration::from_secs(cfg.providers.timeout_secs)));
    build_providers_with_transport(cfg, transport)
}

/// Builds providers, routing HTTP backends through `transport` and the
/// disk cache when one is configured. The search provider exists only in
/// the web regime.
pub fn build_providers_with_transport(
    cfg: &PipelineConfig,
    transport: Arc<dyn Transport>,
) -> Result<Providers, ConfigError> {
    let p = &cfg.providers;
    let client = HttpClient::new(
        transport,
        RetryPolicy { max_attempts: p.http_attempts, ..RetryPolicy::default() },
        p.max_in_flight,
    );
    let cache =
        cfg.cache_dir.as_ref().map(DiskCache::open).transpose().map_err(|e| invalid("cache_dir", e.to_string()))?;

    fn wrap<P, T: ?Sized>(
        inner: P,
        cache: &Option<DiskCache>,
        boxed: fn(P) -> Arc<T>,
        cached: fn(CachedProvider<P>) -> Arc<T>,
    ) -> Arc<T> {
        match cache {
            Some(c) => cached(CachedProvider::new(inner, c.clone())),
            None => boxed(inner),
        }
    }

    let chat: Arc<dyn ChatProvider> = match &p.chat {
        ChatBackend::Offline => Arc::new(OfflineChat::default()),
        ChatBackend::Scripted { path } => {
            Arc::new(ScriptedChat::from_file(path).map_err(provider_err("providers.chat.path"))?)
        }
        ChatBackend::Http { base_url, model, api_key_env } => {
            let key = api_key(api_key_env, "providers.chat.api_key_env")?;
            wrap(HttpChat::new(client.clone(), base_url, model, key), &cache, |x| Arc::new(x), |x| Arc::new(x))
        }
    };
    let embedding: Option<Arc<dyn EmbeddingProvider>> = match &p.embedding {
        EmbeddingBackend::Hash { dim } => Some(Arc::new(HashEmbedder::new(*dim))),
        EmbeddingBackend::None => None,
        EmbeddingBackend::Http { base_url, model, api_key_env } => {
            let key = api_key(api_key_env, "providers.embedding.api_key_env")?;
            Some(wrap(
                HttpEmbedder::new(client.clone(), base_url, model, key),
                &cache,
                |x| Arc::new(x),
                |x| Arc::new(x),
            ))
        }
    };
    let verifier: Arc<dyn VerifierProvider> = match &p.verifier {
        VerifierBackend::Lexical => Arc::new(LexicalVerifier),
        VerifierBackend::Rules { path } => {
            Arc::new(RuleVerifier::from_file(path).map_err(provider_err("providers.verifier.path"))?)
        }
        VerifierBackend::Http { url, api_key_env } => {
            let key = api_key(api_key_env, "providers.verifier.api_key_env")?;
            wrap(HttpVerifier::new(client.clone(), url, key), &cache, |x| Arc::new(x), |x| Arc::new(x))
        }
    };
    let search: Option<Arc<dyn SearchProvider>> = match (cfg.regime, &p.search) {
        (Regime::ContextOnly, _) | (_, SearchBackend::None) => None,
        (Regime::ContextWeb, SearchBackend::Fixture { path }) => {
            Some(Arc::new(FixtureSearch::from_file(path).map_err(provider_err("providers.search.path"))?))
        }
        (Regime::ContextWeb, SearchBackend::Http { url, api_key_env }) => {
            let key = api_key(api_key_env, "providers.search.api_key_env")?;
            Some(wrap(HttpSearch::new(client, url, key), &cache, |x| Arc::new(x), |x| Arc::new(x)))
        }
    };
    Ok(Providers::new(chat, embedding, verifier, search))
}

/// Outcome of probing one configured provider.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub kind: ProviderKind,
    pub backend: String,
    pub outcome: Result<(), String>,
}

/// Sends one minimal request to each HTTP backend; offline backends are
/// reported reachable without a call.
pub fn probe_providers(cfg: &PipelineConfig, providers: &Providers) -> Vec<ProbeResult> {
    let ok = |kind, backend: &str| ProbeResult { kind, backend: backend.into(), outcome: Ok(()) };
    let probed = |kind, backend: &str, r: Result<(), ProviderError>| ProbeResult {
        kind,
        backend: backend.into(),
        outcome: r.map_err(|e| e.to_string()),
    };
    let p = &cfg.providers;
    let mut out = Vec::new();
    out.push(match p.chat {
        ChatBackend::Http { .. } => probed(
            ProviderKind::Chat,
            "http",
            providers.chat.complete("Reply with the JSON object {}.", true).map(drop),
        ),
        ChatBackend::Scripted { .. } => ok(ProviderKind::Chat, "scripted"),
        ChatBackend::Offline => ok(ProviderKind::Chat, "offline"),
    });
    out.push(match (&p.embedding, &providers.embedding) {
        (EmbeddingBackend::Http { .. }, Some(e)) => {
            probed(ProviderKind::Embedding, "http", e.embed(&["ping".to_string()]).map(drop))
        }
        (EmbeddingBackend::None, _) => ok(ProviderKind::Embedding, "none"),
        _ => ok(ProviderKind::Embedding, "hash"),
    });
    out.push(match p.verifier {
        VerifierBackend::Http { .. } => {
            probed(ProviderKind::Verifier, "http", providers.verifier.score("ping", "ping").map(drop))
        }
        VerifierBackend::Rules { .. } => ok(ProviderKind::Verifier, "rules"),
        VerifierBackend::Lexical => ok(ProviderKind::Verifier, "lexical"),
    });
    match (&p.search, &providers.search) {
        (SearchBackend::Http { .. }, Some(s)) => {
            out.push(probed(ProviderKind::Search, "http", s.search("ping", 1, None).map(drop)))
        }
        (SearchBackend::Fixture { .. }, Some(_)) => out.push(ok(ProviderKind::Search, "fixture")),
        _ => {}
    }
    out
}
