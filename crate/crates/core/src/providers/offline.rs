//! Deterministic in-process backends for tests, fixtures and offline runs.
//!
//! None of these emulate the quality of the hosted models; they exist so
//! every stage of the pipeline can run bit-for-bit reproducibly.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    check_embed_input, check_verifier_input, tokenize, ChatProvider, EmbeddingProvider, ProviderError, SearchProvider,
    SearchResult, VerifierProvider,
};
use crate::prompt::{self, TASK_DECOMPOSE, TASK_JUDGE, TASK_SUMMARIZE};

pub const DEFAULT_HASH_DIM: usize = 256;

/// Signed feature hashing of lowercased tokens followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn add_feature(&self, v: &mut [f64], feature: &str) {
        let h = Sha256::digest(feature.as_bytes());
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&h[..8]);
        let bucket = (u64::from_le_bytes(idx) % self.dim as u64) as usize;
        let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            self.add_feature(&mut v, &tok);
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // no tokens, or every token cancelled out: fall back to the raw text
            v.iter_mut().for_each(|x| *x = 0.0);
            self.add_feature(&mut v, &format!("\u{0}raw:{}", text.trim()));
            norm = 1.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn identity(&self) -> String {
        format!("hash:{}", self.dim)
    }
}

/// Claim-token containment: |tokens(claim) ∩ tokens(evidence)| / |tokens(claim)|
/// over lowercased token sets. Test-only stand-in for a trained verifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalVerifier;

impl LexicalVerifier {
    pub fn containment(claim: &str, evidence: &str) -> f64 {
        let claim: BTreeSet<String> = tokenize(claim).into_iter().collect();
        if claim.is_empty() {
            return 0.0;
        }
        let evidence: BTreeSet<String> = tokenize(evidence).into_iter().collect();
        claim.intersection(&evidence).count() as f64 / claim.len() as f64
    }
}

impl VerifierProvider for LexicalVerifier {
    fn score(&self, claim: &str, evidence: &str) -> Result<f64, ProviderError> {
        check_verifier_input(claim, evidence)?;
        Ok(Self::containment(claim, evidence))
    }

    fn identity(&self) -> String {
        "lexical".into()
    }
}

/// A probability override applied when both (case-insensitive) substring
/// conditions hold. Absent conditions always match.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct VerifierRule {
    #[serde(default)]
    pub claim_contains: Option<String>,
    #[serde(default)]
    pub evidence_contains: Option<String>,
    pub probability: f64,
}

impl VerifierRule {
    fn matches(&self, claim: &str, evidence: &str) -> bool {
        let hit = |needle: &Option<String>, hay: &str| {
            needle.as_ref().is_none_or(|n| hay.to_lowercase().contains(&n.to_lowercase()))
        };
        hit(&self.claim_contains, claim) && hit(&self.evidence_contains, evidence)
    }
}

/// First matching rule wins; otherwise lexical containment.
#[derive(Debug, Clone, Default)]
pub struct RuleVerifier {
    rules: Vec<VerifierRule>,
}

impl RuleVerifier {
    pub fn new(rules: Vec<VerifierRule>) -> Self {
        Self { rules }
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Failed(format!("reading {}: {e}", path.display())))?;
        let rules: Vec<VerifierRule> = serde_json::from_str(&raw)
            .map_err(|e| ProviderError::Protocol(format!("verifier rules {}: {e}", path.display())))?;
        Ok(Self::new(rules))
    }
}

impl VerifierProvider for RuleVerifier {
    fn score(&self, claim: &str, evidence: &str) -> Result<f64, ProviderError> {
        check_verifier_input(claim, evidence)?;
        Ok(self
            .rules
            .iter()
            .find(|r| r.matches(claim, evidence))
            .map(|r| r.probability)
            .unwrap_or_else(|| LexicalVerifier::containment(claim, evidence)))
    }

    fn identity(&self) -> String {
        format!("rules:{}", self.rules.len())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum ScriptFileEntry {
    Plain(String),
    Keyed {
        #[serde(default)]
        prompt_digest: Option<String>,
        #[serde(default)]
        response: Option<String>,
        #[serde(default)]
        error: Option<String>,
    },
}

#[derive(Debug, Clone)]
struct ScriptEntry {
    prompt_digest: Option<String>,
    outcome: Result<String, String>,
    used: bool,
}

/// Replays queued responses. Entries keyed by a prompt digest (hex SHA-256
/// of the prompt, or a prefix of at least 8 hex chars) are served only to
/// matching prompts; unkeyed entries are consumed in order.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    entries: Mutex<Vec<ScriptEntry>>,
    prompts: Mutex<Vec<String>>,
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

impl ScriptedChat {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::from_outcomes(responses.into_iter().map(|r| Ok(r.into())))
    }

    /// `Err` entries make the corresponding call fail.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = Result<String, String>>) -> Self {
        let entries =
            outcomes.into_iter().map(|outcome| ScriptEntry { prompt_digest: None, outcome, used: false }).collect();
        Self { entries: Mutex::new(entries), prompts: Mutex::default() }
    }

    pub fn push_keyed(&self, prompt: &str, response: Result<String, String>) {
        self.entries.lock().unwrap().push(ScriptEntry {
            prompt_digest: Some(prompt_digest(prompt)),
            outcome: response,
            used: false,
        });
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Failed(format!("reading {}: {e}", path.display())))?;
        let file: Vec<ScriptFileEntry> = serde_json::from_str(&raw)
            .map_err(|e| ProviderError::Protocol(format!("chat script {}: {e}", path.display())))?;
        let mut entries = Vec::with_capacity(file.len());
        for (i, e) in file.into_iter().enumerate() {
            let entry = match e {
                ScriptFileEntry::Plain(s) => ScriptEntry { prompt_digest: None, outcome: Ok(s), used: false },
                ScriptFileEntry::Keyed { prompt_digest, response, error } => {
                    let outcome = match (response, error) {
                        (Some(r), None) => Ok(r),
                        (None, Some(e)) => Err(e),
                        _ => {
                            return Err(ProviderError::Protocol(format!(
                                "chat script entry {i}: exactly one of `response` or `error` required"
                            )))
                        }
                    };
                    ScriptEntry { prompt_digest: prompt_digest.map(|d| d.to_lowercase()), outcome, used: false }
                }
            };
            entries.push(entry);
        }
        Ok(Self { entries: Mutex::new(entries), prompts: Mutex::default() })
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().unwrap().len()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl ChatProvider for ScriptedChat {
    fn complete(&self, prompt: &str, _json_mode: bool) -> Result<String, ProviderError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        let digest = prompt_digest(prompt);
        let mut entries = self.entries.lock().unwrap();
        let keyed = entries
            .iter()
            .position(|e| !e.used && e.prompt_digest.as_deref().is_some_and(|d| d.len() >= 8 && digest.starts_with(d)));
        let idx = keyed
            .or_else(|| entries.iter().position(|e| !e.used && e.prompt_digest.is_none()))
            .ok_or(ProviderError::Exhausted)?;
        entries[idx].used = true;
        entries[idx].outcome.clone().map_err(ProviderError::Failed)
    }

    fn identity(&self) -> String {
        "scripted".into()
    }
}

/// Fixture lookup: a key matches a query it equals or that it prefixes up
/// to a space, so fixtures can be keyed by fact text alone. The longest
/// matching key wins; misses return no results.
#[derive(Debug, Default)]
pub struct FixtureSearch {
    fixtures: HashMap<String, Vec<SearchResult>>,
    queries: Mutex<Vec<String>>,
}

impl FixtureSearch {
    pub fn new(fixtures: HashMap<String, Vec<SearchResult>>) -> Self {
        Self { fixtures, queries: Mutex::default() }
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Failed(format!("reading {}: {e}", path.display())))?;
        let fixtures = serde_json::from_str(&raw)
            .map_err(|e| ProviderError::Protocol(format!("search fixtures {}: {e}", path.display())))?;
        Ok(Self::new(fixtures))
    }

    pub fn calls(&self) -> usize {
        self.queries.lock().unwrap().len()
    }

    pub fn queries(&self) -> Vec<String> {
        self.queries.lock().unwrap().clone()
    }
}

impl SearchProvider for FixtureSearch {
    fn search(
        &self,
        query: &str,
        limit: usize,
        _site_hints: Option<&[String]>,
    ) -> Result<Vec<SearchResult>, ProviderError> {
        if query.trim().is_empty() || limit == 0 {
            return Err(ProviderError::InvalidInput("search needs a query and limit >= 1".into()));
        }
        self.queries.lock().unwrap().push(query.to_string());
        let hit = self
            .fixtures
            .iter()
            .filter(|(k, _)| {
                query == k.as_str() || query.strip_prefix(k.as_str()).is_some_and(|rest| rest.starts_with(' '))
            })
            .max_by_key(|(k, _)| k.len());
        Ok(hit.map(|(_, r)| r.iter().take(limit).cloned().collect()).unwrap_or_default())
    }

    fn identity(&self) -> String {
        "fixture".into()
    }
}

/// Rule-based chat backend that understands the framed prompts of the
/// decomposition, summarization and judge stages.
///
/// * decompose: splits the claim at `;` and clause-joining conjunctions.
/// * summarize: concatenates source snippets, each followed by its marker.
/// * judge: deductive; any refuted fact refutes, otherwise any uncertain
///   fact (three-way) or no decisive fact yields NEI, else Supported.
#[derive(Debug)]
pub struct OfflineChat {
    splitter: Regex,
}

impl Default for OfflineChat {
    fn default() -> Self {
        Self { splitter: Regex::new(r"(?i)\s*;\s*|,?\s+\b(?:and|but|whereas|while)\b\s+").expect("static regex") }
    }
}

const STOPWORDS: &[&str] = &[
    "about", "after", "against", "among", "because", "before", "between", "could", "during", "their", "there", "these",
    "those", "through", "under", "which", "while", "would", "without",
];

fn trim_punct(s: &str) -> &str {
    s.trim().trim_end_matches(['.', ',', ';', ':', '!', '?']).trim()
}

impl OfflineChat {
    fn decompose(&self, input: &Value) -> Result<String, ProviderError> {
        let claim = input["claim"]
            .as_str()
            .ok_or_else(|| ProviderError::InvalidInput("decompose input lacks `claim`".into()))?;
        let max_words = input["max_words"].as_u64().unwrap_or(25).max(1) as usize;
        let normalized = claim.split_whitespace().collect::<Vec<_>>().join(" ");
        let mut facts = Vec::new();
        for clause in self.splitter.split(trim_punct(&normalized)) {
            let clause = trim_punct(clause);
            let words: Vec<&str> = clause.split_whitespace().collect();
            for window in words.chunks(max_words) {
                if window.is_empty() {
                    continue;
                }
                let text = window.join(" ");
                let mut seen = BTreeSet::new();
                let targets: Vec<String> = window
                    .iter()
                    .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
                    .filter(|w| w.chars().count() >= 5 && !STOPWORDS.contains(&w.to_lowercase().as_str()))
                    .filter(|w| seen.insert(w.to_lowercase()))
                    .take(3)
                    .map(str::to_string)
                    .collect();
                facts.push(json!({"id": format!("f{}", facts.len() + 1), "text": text, "targets": targets}));
            }
        }
        Ok(json!({ "facts": facts }).to_string())
    }

    fn summarize(&self, input: &Value) -> Result<String, ProviderError> {
        let max_words = input["max_words"].as_u64().unwrap_or(120) as usize;
        let sources = input["sources"]
            .as_array()
            .ok_or_else(|| ProviderError::InvalidInput("summarize input lacks `sources`".into()))?;
        let mut words: Vec<String> = Vec::new();
        for s in sources {
            let n = s["n"].as_u64().unwrap_or(0);
            let body =
                s["snippet"].as_str().filter(|t| !t.trim().is_empty()).or_else(|| s["title"].as_str()).unwrap_or("");
            let mut sentence: Vec<String> = body.split_whitespace().map(str::to_string).collect();
            sentence.push(format!("[{n}]"));
            if words.len() + sentence.len() > max_words {
                break;
            }
            words.extend(sentence);
        }
        Ok(words.join(" "))
    }

    fn judge(&self, input: &Value) -> Result<String, ProviderError> {
        let ids = |key: &str| -> Vec<String> {
            input[key]
                .as_array()
                .map(|a| a.iter().filter_map(|f| f["id"].as_str().map(str::to_string)).collect())
                .unwrap_or_default()
        };
        let (supported, refuted, uncertain) = (ids("supported"), ids("refuted"), ids("uncertain"));
        let (verdict, used, why) = if !refuted.is_empty() {
            ("Refuted", refuted.clone(), format!("{} contradicted by the evidence", refuted.join(", ")))
        } else if !uncertain.is_empty() {
            ("NEI", Vec::new(), format!("{} not decided by the evidence", uncertain.join(", ")))
        } else if !supported.is_empty() {
            ("Supported", supported.clone(), format!("{} supported by the evidence", supported.join(", ")))
        } else {
            ("NEI", Vec::new(), "no fact was decided by the evidence".to_string())
        };
        Ok(json!({"final_verdict": verdict, "explanation": why, "used_facts": used}).to_string())
    }
}

impl ChatProvider for OfflineChat {
    fn complete(&self, prompt: &str, _json_mode: bool) -> Result<String, ProviderError> {
        let (task, input) = prompt::parse_framed(prompt)
            .ok_or_else(|| ProviderError::InvalidInput("offline chat only understands framed prompts".into()))?;
        match task.as_str() {
            TASK_DECOMPOSE => self.decompose(&input),
            TASK_SUMMARIZE => self.summarize(&input),
            TASK_JUDGE => self.judge(&input),
            other => Err(ProviderError::InvalidInput(format!("unknown task `{other}`"))),
        }
    }

    fn identity(&self) -> String {
        "offline".into()
    }
}
