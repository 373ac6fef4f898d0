//! Uncertainty-gated web corroboration: allowlisted search, cited
//! summarization, evidence augmentation and rescoring.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use url::Url;

use crate::prompt::{self, TASK_SUMMARIZE};
pub use crate::providers::SearchResult;
use crate::providers::{ChatProvider, SearchProvider, VerifierProvider};
use crate::types::{AtomicFact, Chunk, FactAssessment, FactLabel, Thresholds};
use crate::verify::{gate, score_fact};

pub const WEB_SEPARATOR: &str = "---WEB EVIDENCE---";
pub const SUMMARY_MAX_WORDS: usize = 120;
pub const DEFAULT_SEARCH_K: usize = 5;
pub const DEFAULT_WEB_QUERY_MAX_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorroborationError {
    #[error("invalid allowlist entry `{0}`: expected a bare lowercase domain")]
    AllowlistEntry(String),
    #[error("allowlist is empty")]
    EmptyAllowlist,
    #[error("summarization failed: {0}")]
    SummarizationFailed(String),
}

/// Registrable domains web evidence may come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Allowlist {
    domains: Vec<String>,
}

impl Allowlist {
    /// Entries are trimmed and lowercased; schemes, paths, ports and
    /// whitespace are rejected.
    pub fn new<S: AsRef<str>>(entries: impl IntoIterator<Item = S>) -> Result<Self, CorroborationError> {
        let mut domains: Vec<String> = Vec::new();
        for raw in entries {
            let entry = raw.as_ref().trim().trim_end_matches('.').to_lowercase();
            let bad = entry.is_empty()
                || entry.starts_with('.')
                || entry.contains("..")
                || entry.chars().any(|c| c.is_whitespace() || matches!(c, '/' | ':' | '?' | '#' | '@'));
            if bad {
                return Err(CorroborationError::AllowlistEntry(raw.as_ref().to_string()));
            }
            if !domains.contains(&entry) {
                domains.push(entry);
            }
        }
        if domains.is_empty() {
            return Err(CorroborationError::EmptyAllowlist);
        }
        Ok(Self { domains })
    }

    /// Authoritative biomedical and reference sources.
    pub fn scientific_default() -> Self {
        Self::new([
            "nih.gov",
            "who.int",
            "cdc.gov",
            "fda.gov",
            "clinicaltrials.gov",
            "wikipedia.org",
            "pubmed.ncbi.nlm.nih.gov",
        ])
        .expect("static allowlist is valid")
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Exact match, or a subdomain aligned at a label boundary.
    pub fn allows_host(&self, host: &str) -> bool {
        let host = host.trim_end_matches('.').to_lowercase();
        self.domains
            .iter()
            .any(|d| host == *d || host.strip_suffix(d.as_str()).is_some_and(|prefix| prefix.ends_with('.')))
    }

    pub fn allows_url(&self, url: &str) -> bool {
        Url::parse(url)
            .ok()
            .and_then(|u| u.host_str().map(str::to_string))
            .is_some_and(|h| !h.is_empty() && self.allows_host(&h))
    }
}

impl TryFrom<Vec<String>> for Allowlist {
    type Error = CorroborationError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Allowlist> for Vec<String> {
    fn from(a: Allowlist) -> Self {
        a.domains
    }
}

/// Auxiliary text with inline `[n]` markers; `citations[n-1]` is marker `n`'s URL.
#[derive(Debug, Clone, PartialEq)]
pub struct WebEvidence {
    pub summary: String,
    pub citations: Vec<String>,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fact text, then as much of the snippet as fits in `max_len` characters.
/// The fact text is never cut, even if it alone exceeds `max_len`.
pub fn build_web_query(fact: &AtomicFact, snippet: &Chunk, max_len: usize) -> String {
    let fact_text = normalize_ws(&fact.text);
    let room = max_len.saturating_sub(fact_text.chars().count() + 1);
    let context: String = normalize_ws(&snippet.text).chars().take(room).collect();
    let context = context.trim_end();
    if context.is_empty() {
        fact_text
    } else {
        format!("{fact_text} {context}")
    }
}

pub fn filter_results_by_domain(results: &[SearchResult], allow: &Allowlist) -> Vec<SearchResult> {
    results.iter().filter(|r| allow.allows_url(&r.url)).cloned().collect()
}

pub fn build_summary_prompt(results: &[SearchResult], fact: &AtomicFact) -> String {
    let sources: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(i, r)| json!({"n": i + 1, "title": r.title, "snippet": r.snippet, "url": r.url}))
        .collect();
    let input = json!({"fact": fact.text, "max_words": SUMMARY_MAX_WORDS, "sources": sources});
    format!(
        "{task}\n\
         Summarize in at most {SUMMARY_MAX_WORDS} words what the numbered sources say about the fact. \
         Cite sources inline with bracketed numbers such as [1] or [2] that refer to the source numbers. \
         Use only the sources. Reply with the summary text only.\n\
         {input}",
        task = prompt::task_line(TASK_SUMMARIZE),
        input = prompt::input_line(&input),
    )
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").expect("static regex"))
}

/// Caps the summary at [`SUMMARY_MAX_WORDS`] words, renumbers markers in
/// order of first reference and drops markers that name no source.
fn finalize_summary(raw: &str, results: &[SearchResult]) -> WebEvidence {
    let capped = raw.split_whitespace().take(SUMMARY_MAX_WORDS).collect::<Vec<_>>().join(" ");
    let mut order: HashMap<usize, usize> = HashMap::new();
    let mut citations = Vec::new();
    let renumbered = marker_regex().replace_all(&capped, |caps: &regex::Captures| {
        let n: usize = caps[1].parse().unwrap_or(0);
        if n == 0 || n > results.len() {
            return String::new();
        }
        let next = order.len() + 1;
        let slot = *order.entry(n).or_insert_with(|| {
            citations.push(results[n - 1].url.clone());
            next
        });
        format!("[{slot}]")
    });
    WebEvidence { summary: normalize_ws(&renumbered), citations }
}

pub fn summarize_with_citations(
    results: &[SearchResult],
    fact: &AtomicFact,
    chat: &dyn ChatProvider,
) -> Result<WebEvidence, CorroborationError> {
    if results.is_empty() {
        return Err(CorroborationError::SummarizationFailed("no sources".into()));
    }
    let raw = chat
        .complete(&build_summary_prompt(results, fact), false)
        .map_err(|e| CorroborationError::SummarizationFailed(e.to_string()))?;
    let web = finalize_summary(prompt::strip_code_fence(&raw), results);
    if web.summary.is_empty() {
        return Err(CorroborationError::SummarizationFailed("empty summary".into()));
    }
    Ok(web)
}

pub fn augment_evidence(snippet: &Chunk, web: &WebEvidence) -> String {
    format!("{}\n{WEB_SEPARATOR}\n{}", snippet.text, web.summary)
}

/// True when the two probabilities fall in opposite decisive regions.
pub fn is_conflict(p_local: f64, p_final: f64, t: &Thresholds) -> bool {
    let (a, b) = (gate(p_local, t), gate(p_final, t));
    matches!((a, b), (FactLabel::Supported, FactLabel::Refuted) | (FactLabel::Refuted, FactLabel::Supported))
}

#[derive(Debug, Clone)]
pub struct CorroborationSettings {
    pub allowlist: Allowlist,
    pub thresholds: Thresholds,
    pub k: usize,
    pub web_query_max_len: usize,
    /// Pass the allowlist to the search backend as site restrictions.
    pub site_hints: bool,
}

impl CorroborationSettings {
    pub fn new(allowlist: Allowlist, thresholds: Thresholds) -> Self {
        Self {
            allowlist,
            thresholds,
            k: DEFAULT_SEARCH_K,
            web_query_max_len: DEFAULT_WEB_QUERY_MAX_LEN,
            site_hints: true,
        }
    }
}

fn unchanged(a: &FactAssessment, note: String) -> FactAssessment {
    tracing::info!(fact = %a.fact.id, %note, "corroboration skipped");
    FactAssessment { note: Some(note), ..a.clone() }
}

/// Searches, filters, summarizes and rescores one fact. Callers decide
/// which facts to corroborate; see [`corroborate_uncertain`]. Any
/// degradation returns the assessment unrescored with a note.
pub fn corroborate_fact(
    a: &FactAssessment,
    search: &dyn SearchProvider,
    chat: &dyn ChatProvider,
    v: &dyn VerifierProvider,
    s: &CorroborationSettings,
) -> FactAssessment {
    let query = build_web_query(&a.fact, &a.snippet, s.web_query_max_len);
    let hints = s.site_hints.then(|| s.allowlist.domains());
    let results = match search.search(&query, s.k.max(1), hints) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(fact = %a.fact.id, error = %e, "search failed");
            Vec::new()
        }
    };
    let kept = filter_results_by_domain(&results, &s.allowlist);
    if kept.is_empty() {
        return unchanged(a, format!("no allowlisted search results ({} returned)", results.len()));
    }
    let web = match summarize_with_citations(&kept, &a.fact, chat) {
        Ok(w) => w,
        Err(e) => return unchanged(a, e.to_string()),
    };
    let augmented = augment_evidence(&a.snippet, &web);
    let p = match score_fact(&a.fact.text, &augmented, v) {
        Ok(p) => p.value(),
        Err(e) => return unchanged(a, format!("rescoring failed: {e}")),
    };
    FactAssessment {
        p_final: p,
        rescored: true,
        label: gate(p, &s.thresholds),
        web_evidence: Some(web.summary),
        citations: web.citations,
        conflict: is_conflict(a.p_local, p, &s.thresholds),
        note: None,
        ..a.clone()
    }
}

/// Corroborates exactly the Uncertain assessments; the rest pass through.
pub fn corroborate_uncertain(
    assessments: &[FactAssessment],
    search: &dyn SearchProvider,
    chat: &dyn ChatProvider,
    v: &dyn VerifierProvider,
    s: &CorroborationSettings,
) -> Vec<FactAssessment> {
    assessments
        .iter()
        .map(|a| if a.label == FactLabel::Uncertain { corroborate_fact(a, search, chat, v, s) } else { a.clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{
        FixtureSearch, LexicalVerifier, OfflineChat, ProviderError, RuleVerifier, ScriptedChat, VerifierRule,
    };
    use crate::types::SelectionMethod;
    use proptest::prelude::*;

    fn allow() -> Allowlist {
        Allowlist::new(["nih.gov", "who.int"]).unwrap()
    }

    fn result(url: &str, snippet: &str) -> SearchResult {
        SearchResult { url: url.into(), title: "t".into(), snippet: snippet.into() }
    }

    fn assessment(text: &str, snippet: &str, p: f64) -> FactAssessment {
        let t = Thresholds::default();
        FactAssessment {
            fact: AtomicFact::new("f1", text, vec![]),
            snippet: Chunk { start: 0, end: snippet.chars().count(), text: snippet.into() },
            selection_method: SelectionMethod::Overlap,
            p_local: p,
            p_final: p,
            rescored: false,
            label: gate(p, &t),
            web_evidence: None,
            citations: vec![],
            conflict: false,
            note: None,
        }
    }

    #[test]
    fn allowlist_validation() {
        assert!(Allowlist::new(["https://nih.gov"]).is_err());
        assert!(Allowlist::new(["nih.gov/path"]).is_err());
        assert_eq!(Allowlist::new(Vec::<String>::new()), Err(CorroborationError::EmptyAllowlist));
        assert_eq!(Allowlist::new([" NIH.gov "]).unwrap().domains(), ["nih.gov"]);
    }

    #[test]
    fn host_matching_at_label_boundaries() {
        let a = allow();
        assert!(a.allows_url("https://www.nih.gov/x"));
        assert!(a.allows_url("https://pubmed.ncbi.nlm.nih.gov/123"));
        assert!(a.allows_url("http://NIH.GOV"));
        assert!(!a.allows_url("https://evil-nih.gov/"));
        assert!(!a.allows_url("https://nih.gov.evil.com/"));
        assert!(!a.allows_url("not a url"));
        let rs = vec![result("https://www.nih.gov/a", ""), result("https://evil-nih.gov", ""), result("::", "")];
        assert_eq!(filter_results_by_domain(&rs, &a), rs[..1]);
        assert!(filter_results_by_domain(&[], &a).is_empty());
    }

    #[test]
    fn web_query_fits_and_truncates() {
        let a = assessment("aspirin reduces  stroke", "Aspirin trial\n data.", 0.5);
        assert_eq!(build_web_query(&a.fact, &a.snippet, 256), "aspirin reduces stroke Aspirin trial data.");
        let long = assessment("aspirin reduces stroke", &"word ".repeat(200), 0.5);
        let q = build_web_query(&long.fact, &long.snippet, 50);
        assert!(q.chars().count() <= 50);
        assert!(q.starts_with("aspirin reduces stroke "));
        assert_eq!(q, build_web_query(&long.fact, &long.snippet, 50));
        assert_eq!(build_web_query(&long.fact, &long.snippet, 5), "aspirin reduces stroke");
    }

    #[test]
    fn summary_markers_and_citations() {
        let rs = vec![result("https://nih.gov/1", "a"), result("https://who.int/2", "b")];
        let fact = AtomicFact::new("f1", "x", vec![]);
        let chat = ScriptedChat::new(["A holds [1]. B agrees [2]."]);
        let w = summarize_with_citations(&rs, &fact, &chat).unwrap();
        assert!(w.summary.contains("[1]") && w.summary.contains("[2]"));
        assert_eq!(w.citations, ["https://nih.gov/1", "https://who.int/2"]);

        let chat = ScriptedChat::new(["Only the second source [2] and a bogus [9]."]);
        let w = summarize_with_citations(&rs, &fact, &chat).unwrap();
        assert_eq!(w.citations, ["https://who.int/2"]);
        assert_eq!(w.summary, "Only the second source [1] and a bogus .");

        let chat = ScriptedChat::from_outcomes([Err("down".to_string())]);
        assert!(matches!(summarize_with_citations(&rs, &fact, &chat), Err(CorroborationError::SummarizationFailed(_))));
    }

    #[test]
    fn summary_is_capped() {
        let rs = vec![result("https://nih.gov/1", "a")];
        let chat = ScriptedChat::new([format!("{} [1]", "w ".repeat(300))]);
        let w = summarize_with_citations(&rs, &AtomicFact::new("f", "x", vec![]), &chat).unwrap();
        assert_eq!(w.summary.split_whitespace().count(), SUMMARY_MAX_WORDS);
        assert!(w.citations.is_empty());
    }

    #[test]
    fn augmentation_layout() {
        let snippet = Chunk { start: 0, end: 3, text: "abc".into() };
        let web = WebEvidence { summary: "sum [1]".into(), citations: vec![] };
        let out = augment_evidence(&snippet, &web);
        assert_eq!(out.matches(WEB_SEPARATOR).count(), 1);
        assert_eq!(out.len(), 3 + 1 + WEB_SEPARATOR.len() + 1 + 7);
        assert!(out.starts_with("abc") && out.ends_with("sum [1]"));
    }

    fn settings() -> CorroborationSettings {
        CorroborationSettings::new(allow(), Thresholds::default())
    }

    #[test]
    fn corroboration_raises_uncertain_fact() {
        // "aspirin reduces stroke risk" vs snippet "aspirin stroke": 2 of 4 tokens → 0.5
        let a = assessment("aspirin reduces stroke risk", "aspirin stroke", 0.5);
        let s = settings();
        let q = build_web_query(&a.fact, &a.snippet, s.web_query_max_len);
        let search = FixtureSearch::new(HashMap::from([(
            q,
            vec![result("https://www.nih.gov/a", "aspirin reduces risk of stroke"), result("https://bad.com", "x")],
        )]));
        let out = corroborate_fact(&a, &search, &OfflineChat::default(), &LexicalVerifier, &s);
        assert!(out.rescored);
        assert_eq!(out.p_local, 0.5);
        assert_eq!(out.p_final, 1.0);
        assert_eq!(out.label, FactLabel::Supported);
        assert_eq!(out.citations, ["https://www.nih.gov/a"]);
        assert!(!out.conflict);
        out.check(Some(&s.thresholds)).unwrap();
    }

    #[test]
    fn non_allowlisted_results_leave_assessment_unchanged() {
        let a = assessment("aspirin reduces stroke risk", "aspirin stroke", 0.5);
        let s = settings();
        let q = build_web_query(&a.fact, &a.snippet, s.web_query_max_len);
        let search = FixtureSearch::new(HashMap::from([(q, vec![result("https://evil-nih.gov/a", "aspirin")])]));
        let out = corroborate_fact(&a, &search, &OfflineChat::default(), &LexicalVerifier, &s);
        assert!(!out.rescored);
        assert_eq!((out.p_final, out.label), (a.p_final, a.label));
        assert!(out.note.is_some());
    }

    struct FailingSearch;
    impl SearchProvider for FailingSearch {
        fn search(&self, _: &str, _: usize, _: Option<&[String]>) -> Result<Vec<SearchResult>, ProviderError> {
            Err(ProviderError::Transport("down".into()))
        }
        fn identity(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn search_failure_degrades_to_no_rescoring() {
        let a = assessment("x y", "x", 0.5);
        let out = corroborate_fact(&a, &FailingSearch, &OfflineChat::default(), &LexicalVerifier, &settings());
        assert!(!out.rescored);
    }

    #[test]
    fn summarization_failure_skips_rescoring() {
        let a = assessment("x y", "x", 0.5);
        let s = settings();
        let q = build_web_query(&a.fact, &a.snippet, s.web_query_max_len);
        let search = FixtureSearch::new(HashMap::from([(q, vec![result("https://nih.gov", "y")])]));
        let chat = ScriptedChat::from_outcomes([Err("down".to_string())]);
        let out = corroborate_fact(&a, &search, &chat, &LexicalVerifier, &s);
        assert!(!out.rescored);
        assert!(out.web_evidence.is_none());
    }

    #[test]
    fn decisive_flip_is_a_conflict() {
        let t = Thresholds::default();
        assert!(is_conflict(0.9, 0.1, &t));
        assert!(is_conflict(0.25, 0.8, &t));
        assert!(!is_conflict(0.5, 0.1, &t));
        assert!(!is_conflict(0.9, 0.5, &t));

        let a = assessment("aspirin reduces stroke", "aspirin reduces stroke", 0.9);
        let s = settings();
        let q = build_web_query(&a.fact, &a.snippet, s.web_query_max_len);
        let search = FixtureSearch::new(HashMap::from([(q, vec![result("https://nih.gov", "no effect")])]));
        let v = RuleVerifier::new(vec![VerifierRule {
            claim_contains: None,
            evidence_contains: Some(WEB_SEPARATOR.into()),
            probability: 0.1,
        }]);
        let out = corroborate_fact(&a, &search, &OfflineChat::default(), &v, &s);
        assert!(out.rescored && out.conflict);
        assert_eq!(out.label, FactLabel::Refuted);
    }

    #[test]
    fn only_uncertain_facts_trigger_search() {
        let s = settings();
        let search = FixtureSearch::default();
        let items = vec![assessment("a", "a", 0.9), assessment("b", "b", 0.5), assessment("c", "c", 0.1)];
        let out = corroborate_uncertain(&items, &search, &OfflineChat::default(), &LexicalVerifier, &s);
        assert_eq!(search.calls(), 1);
        assert_eq!(search.queries()[0], build_web_query(&items[1].fact, &items[1].snippet, 256));
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], items[0]);
        assert_eq!(out[2], items[2]);

        let search = FixtureSearch::default();
        corroborate_uncertain(&items[..1], &search, &OfflineChat::default(), &LexicalVerifier, &s);
        assert_eq!(search.calls(), 0);
        let all: Vec<_> = (0..4).map(|_| assessment("u", "u", 0.5)).collect();
        corroborate_uncertain(&all, &search, &OfflineChat::default(), &LexicalVerifier, &s);
        assert_eq!(search.calls(), 4);
    }

    proptest! {
        #[test]
        fn suffix_rule_matches_label_boundaries(
            labels in prop::collection::vec("[a-z]{1,6}", 0..3),
            glue in "[a-z-]{0,3}",
        ) {
            let a = Allowlist::new(["nih.gov"]).unwrap();
            let mut host = labels.join(".");
            if !host.is_empty() { host.push('.'); }
            let aligned = format!("{host}nih.gov");
            let aligned_url = format!("https://{aligned}/p");
            prop_assert!(a.allows_url(&aligned_url));
            let glued = format!("{host}{glue}nih.gov");
            let expected = glue.is_empty();
            let glued_url = format!("https://{glued}/p");
            prop_assert_eq!(a.allows_url(&glued_url), expected);
        }
    }
}
