//! Sentence-group chunking of the evidence document and per-fact snippet
//! selection (embedding cosine, with a token-overlap fallback).

use std::collections::{BTreeSet, HashSet};

use thiserror::Error;

use crate::providers::{tokenize, EmbeddingProvider};
use crate::types::{AtomicFact, Chunk, EvidenceDoc, SelectionMethod};

pub const DEFAULT_OVERLAP_SENTENCES: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("cannot take the cosine of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("embedding provider unavailable: {0}")]
    EmbeddingUnavailable(String),
    #[error("no chunks to select from")]
    NoChunks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
    pub method: SelectionMethod,
}

/// A sentence and its character offset in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub start: usize,
}

impl Sentence {
    pub fn end(&self) -> usize {
        self.start + self.text.chars().count()
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits after every `.`, `!` or `?` that is followed by whitespace or the
/// end of the text. Whitespace between sentences is dropped; offsets are
/// character offsets into `text`.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        while i < n && chars[i].is_whitespace() {
            i += 1;
        }
        if i >= n {
            break;
        }
        let start = i;
        let mut end = None;
        while i < n {
            if is_terminator(chars[i]) && (i + 1 == n || chars[i + 1].is_whitespace()) {
                i += 1;
                end = Some(i);
                break;
            }
            i += 1;
        }
        let end = end.unwrap_or_else(|| {
            let mut e = n;
            while e > start && chars[e - 1].is_whitespace() {
                e -= 1;
            }
            e
        });
        out.push(Sentence { text: chars[start..end].iter().collect(), start });
    }
    out
}

/// Greedy sentence packing into windows of at most `max_chars` characters.
///
/// Each window after the first restarts `overlap_sentences` sentences before
/// the end of the previous one, moved forward only as far as needed to fit
/// the next unseen sentence. A sentence longer than `max_chars` forms its
/// own window.
pub fn chunk_document(doc: &EvidenceDoc, max_chars: usize, overlap_sentences: usize) -> Vec<Chunk> {
    let chars: Vec<char> = doc.text().chars().collect();
    let sentences = split_sentences(doc.text());
    let m = sentences.len();
    let bounds: Vec<(usize, usize)> = sentences.iter().map(|s| (s.start, s.end())).collect();
    let span = |i: usize, j: usize| bounds[j].1 - bounds[i].0;

    let mut chunks = Vec::new();
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && span(i, j + 1) <= max_chars {
            j += 1;
        }
        let (start, end) = (bounds[i].0, bounds[j].1);
        chunks.push(Chunk { start, end, text: chars[start..end].iter().collect() });
        if j + 1 == m {
            break;
        }
        let mut next = (j + 1).saturating_sub(overlap_sentences).max(i + 1);
        while next <= j && span(next, j + 1) > max_chars {
            next += 1;
        }
        i = next;
    }
    chunks
}

/// Fact text followed by each target not already present in it
/// (case-insensitive), first occurrence of each target kept.
pub fn build_fact_query(fact: &AtomicFact) -> String {
    let lowered = fact.text.to_lowercase();
    let mut seen = HashSet::new();
    let mut parts = vec![fact.text.trim().to_string()];
    for target in &fact.targets {
        let target = target.trim();
        let key = target.to_lowercase();
        if target.is_empty() || lowered.contains(&key) || !seen.insert(key) {
            continue;
        }
        parts.push(target.to_string());
    }
    parts.join(" ")
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SelectionError> {
    if u.len() != v.len() {
        return Err(SelectionError::Dimension(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SelectionError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Highest score wins; equal scores go to the smaller start offset.
fn argmax(chunks: &[Chunk], scores: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..chunks.len() {
        let better = scores[k] > scores[best] || (scores[k] == scores[best] && chunks[k].start < chunks[best].start);
        if better {
            best = k;
        }
    }
    best
}

/// Embeds the query and every chunk in one batch and returns the chunk
/// with the highest cosine similarity to the query.
pub fn select_snippet_embedding(
    query: &str,
    chunks: &[Chunk],
    emb: &dyn EmbeddingProvider,
) -> Result<ScoredChunk, SelectionError> {
    if chunks.is_empty() {
        return Err(SelectionError::NoChunks);
    }
    let mut batch = Vec::with_capacity(chunks.len() + 1);
    batch.push(query.to_string());
    batch.extend(chunks.iter().map(|c| c.text.clone()));
    let vectors = emb.embed(&batch).map_err(|e| SelectionError::EmbeddingUnavailable(e.to_string()))?;
    if vectors.len() != batch.len() {
        return Err(SelectionError::EmbeddingUnavailable(format!(
            "expected {} vectors, got {}",
            batch.len(),
            vectors.len()
        )));
    }
    let q = &vectors[0];
    let scores = vectors[1..].iter().map(|v| cosine(q, v)).collect::<Result<Vec<_>, _>>()?;
    let best = argmax(chunks, &scores);
    Ok(ScoredChunk { chunk: chunks[best].clone(), score: scores[best], method: SelectionMethod::Embedding })
}

/// Fraction of distinct query tokens that occur in the chunk.
pub fn overlap_score(query: &str, chunk_text: &str) -> f64 {
    let q: BTreeSet<String> = tokenize(query).into_iter().collect();
    let c: BTreeSet<String> = tokenize(chunk_text).into_iter().collect();
    q.intersection(&c).count() as f64 / q.len().max(1) as f64
}

pub fn select_snippet_overlap(query: &str, chunks: &[Chunk]) -> Result<ScoredChunk, SelectionError> {
    if chunks.is_empty() {
        return Err(SelectionError::NoChunks);
    }
    let scores: Vec<f64> = chunks.iter().map(|c| overlap_score(query, &c.text)).collect();
    let best = argmax(chunks, &scores);
    Ok(ScoredChunk { chunk: chunks[best].clone(), score: scores[best], method: SelectionMethod::Overlap })
}

/// Embedding selection when a provider is present and succeeds, token
/// overlap otherwise.
pub fn select_snippet(
    fact: &AtomicFact,
    chunks: &[Chunk],
    emb: Option<&dyn EmbeddingProvider>,
) -> Result<ScoredChunk, SelectionError> {
    let query = build_fact_query(fact);
    if let Some(emb) = emb {
        match select_snippet_embedding(&query, chunks, emb) {
            Ok(s) => return Ok(s),
            Err(SelectionError::NoChunks) => return Err(SelectionError::NoChunks),
            Err(e) => tracing::warn!(fact = %fact.id, error = %e, "embedding selection failed; using token overlap"),
        }
    }
    select_snippet_overlap(&query, chunks)
}
