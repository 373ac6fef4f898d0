//! Per-fact support scoring and probability gating.

use thiserror::Error;

use crate::decompose::FactSet;
use crate::evidence::{select_snippet, SelectionError};
use crate::providers::{EmbeddingProvider, ProviderError, VerifierProvider};
use crate::types::{Chunk, FactAssessment, FactLabel, Thresholds};

/// Out-of-range verifier outputs within this distance of [0, 1] are clamped.
pub const CLAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("verifier unavailable: {0}")]
    VerifierUnavailable(String),
    #[error("verifier protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

/// A support probability in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SupportScore(f64);

impl SupportScore {
    pub fn new(p: f64) -> Option<Self> {
        (0.0..=1.0).contains(&p).then_some(Self(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn score_fact(fact_text: &str, evidence_text: &str, v: &dyn VerifierProvider) -> Result<SupportScore, VerifyError> {
    let p = v.score(fact_text, evidence_text).map_err(|e| match e {
        ProviderError::Protocol(m) => VerifyError::Protocol(m),
        other => VerifyError::VerifierUnavailable(other.to_string()),
    })?;
    if !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&p) {
        return Err(VerifyError::Protocol(format!("probability {p} outside [0, 1]")));
    }
    Ok(SupportScore(p.clamp(0.0, 1.0)))
}

/// `p >= hi` → Supported, `p <= lo` → Refuted, otherwise Uncertain.
/// Both boundaries are decisive.
pub fn gate(p: f64, t: &Thresholds) -> FactLabel {
    if p >= t.hi {
        FactLabel::Supported
    } else if p <= t.lo {
        FactLabel::Refuted
    } else {
        FactLabel::Uncertain
    }
}

/// Selects a snippet for every fact and scores the fact against it.
/// Output order follows the input facts.
pub fn assess_all(
    facts: &FactSet,
    chunks: &[Chunk],
    emb: Option<&dyn EmbeddingProvider>,
    v: &dyn VerifierProvider,
    t: &Thresholds,
) -> Result<Vec<FactAssessment>, VerifyError> {
    facts
        .facts
        .iter()
        .map(|fact| {
            let picked = select_snippet(fact, chunks, emb)?;
            let p = score_fact(&fact.text, &picked.chunk.text, v)?.value();
            Ok(FactAssessment {
                fact: fact.clone(),
                snippet: picked.chunk,
                selection_method: picked.method,
                p_local: p,
                p_final: p,
                rescored: false,
                label: gate(p, t),
                web_evidence: None,
                citations: Vec::new(),
                conflict: false,
                note: None,
            })
        })
        .collect()
}
