//! Shared domain vocabulary: claims, evidence, atomic facts, labels,
//! thresholds and the per-example verdict trace.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Violation of a domain-type invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("claim text is empty")]
    EmptyClaim,
    #[error("evidence document text is empty")]
    EmptyDocument,
    #[error("threshold `{field}` = {value} is outside [0, 1]")]
    ProbabilityRange { field: &'static str, value: f64 },
    #[error("threshold band is degenerate: lo ({lo}) must be < hi ({hi})")]
    DegenerateBand { lo: f64, hi: f64 },
    #[error("`{0}` must be at least 1")]
    ZeroCap(&'static str),
    #[error("invalid trace: {0}")]
    Trace(String),
}

/// Number of maximal whitespace-delimited tokens in `text`.
pub fn fact_word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Claim(String);

impl Claim {
    pub fn new(text: impl Into<String>) -> Result<Self, ValidationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValidationError::EmptyClaim);
        }
        Ok(Self(text))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Claim {
    type Error = ValidationError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Claim> for String {
    fn from(c: Claim) -> Self {
        c.0
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The single evidence document a claim is checked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    text: String,
    source_id: String,
}

impl EvidenceDoc {
    pub fn new(text: impl Into<String>, source_id: impl Into<String>) -> Result<Self, ValidationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValidationError::EmptyDocument);
        }
        Ok(Self { text, source_id: source_id.into() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Length in characters (Unicode scalar values); chunk offsets use this unit.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// One predicate-argument unit extracted from a claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub targets: Vec<String>,
}

impl AtomicFact {
    pub fn new(id: impl Into<String>, text: impl Into<String>, targets: Vec<String>) -> Self {
        Self { id: id.into(), text: text.into(), targets }
    }

    pub fn word_count(&self) -> usize {
        fact_word_count(&self.text)
    }
}

/// A contiguous window of the evidence document. Offsets are character
/// offsets, `start` inclusive and `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Chunk {
    pub fn char_len(&self) -> usize {
        self.end - self.start
    }
}

/// Per-fact label derived from a support probability.
///
/// The derived ordering is `Refuted < Uncertain < Supported`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FactLabel {
    Refuted,
    Uncertain,
    Supported,
}

impl fmt::Display for FactLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactLabel::Supported => "Supported",
            FactLabel::Refuted => "Refuted",
            FactLabel::Uncertain => "Uncertain",
        })
    }
}

/// Claim-level decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Supported,
    Refuted,
    #[serde(rename = "NEI")]
    Nei,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Supported, Verdict::Refuted, Verdict::Nei];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Supported => "Supported",
            Verdict::Refuted => "Refuted",
            Verdict::Nei => "NEI",
        }
    }

    /// Case-insensitive match against `Supported`, `Refuted` and `NEI`.
    pub fn parse_loose(s: &str) -> Option<Verdict> {
        let s = s.trim();
        Verdict::ALL.into_iter().find(|v| v.as_str().eq_ignore_ascii_case(s))
    }
}

impl From<FactLabel> for Verdict {
    fn from(label: FactLabel) -> Self {
        match label {
            FactLabel::Supported => Verdict::Supported,
            FactLabel::Refuted => Verdict::Refuted,
            FactLabel::Uncertain => Verdict::Nei,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_LO: f64 = 0.25;
pub const DEFAULT_HI: f64 = 0.80;
pub const DEFAULT_MAX_FACT_WORDS: usize = 25;
pub const DEFAULT_MAX_CHUNK_CHARS: usize = 420;

/// Gating thresholds and size caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub lo: f64,
    pub hi: f64,
    pub max_fact_words: usize,
    pub max_chunk_chars: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            lo: DEFAULT_LO,
            hi: DEFAULT_HI,
            max_fact_words: DEFAULT_MAX_FACT_WORDS,
            max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS,
        }
    }
}

impl Thresholds {
    /// Returns `self` unchanged when every invariant holds.
    pub fn validate(self) -> Result<Self, ValidationError> {
        for (field, value) in [("lo", self.lo), ("hi", self.hi)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ValidationError::ProbabilityRange { field, value });
            }
        }
        if self.lo >= self.hi {
            return Err(ValidationError::DegenerateBand { lo: self.lo, hi: self.hi });
        }
        if self.max_fact_words == 0 {
            return Err(ValidationError::ZeroCap("max_fact_words"));
        }
        if self.max_chunk_chars == 0 {
            return Err(ValidationError::ZeroCap("max_chunk_chars"));
        }
        Ok(self)
    }
}

pub fn validate_thresholds(t: Thresholds) -> Result<Thresholds, ValidationError> {
    t.validate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Embedding,
    Overlap,
}

/// Verification state of one fact, before and after corroboration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactAssessment {
    pub fact: AtomicFact,
    pub snippet: Chunk,
    pub selection_method: SelectionMethod,
    pub p_local: f64,
    pub p_final: f64,
    pub rescored: bool,
    pub label: FactLabel,
    pub web_evidence: Option<String>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default)]
    pub conflict: bool,
    /// Why corroboration was skipped or degraded, when it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl FactAssessment {
    /// Checks the per-assessment invariants. `thresholds` enables the
    /// label-derivation check.
    pub fn check(&self, thresholds: Option<&Thresholds>) -> Result<(), ValidationError> {
        let bad = |msg: String| Err(ValidationError::Trace(format!("fact {}: {msg}", self.fact.id)));
        for (name, p) in [("p_local", self.p_local), ("p_final", self.p_final)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !self.rescored && (self.p_final != self.p_local || self.web_evidence.is_some()) {
            return bad("not rescored but p_final differs or web evidence present".into());
        }
        if self.conflict && !self.rescored {
            return bad("conflict flagged without rescoring".into());
        }
        if let Some(t) = thresholds {
            let expected = crate::verify::gate(self.p_final, t);
            if expected != self.label {
                return bad(format!("label {} but gate(p_final) = {expected}", self.label));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum Regime {
    #[value(name = "context-only")]
    #[serde(alias = "context-only")]
    ContextOnly,
    #[value(name = "context-web")]
    #[serde(alias = "context-web")]
    ContextWeb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
pub enum Ablation {
    #[default]
    #[value(name = "none")]
    #[serde(alias = "none")]
    None,
    #[value(name = "no-atomic")]
    #[serde(alias = "no-atomic")]
    NoAtomic,
    #[value(name = "majority-vote")]
    #[serde(alias = "majority-vote")]
    MajorityVote,
}

/// Two-way tasks decide Supported/Refuted; three-way tasks also admit NEI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
pub enum TaskMode {
    #[value(name = "two-way")]
    #[serde(alias = "two-way")]
    TwoWay,
    #[default]
    #[value(name = "three-way")]
    #[serde(alias = "three-way")]
    ThreeWay,
}

/// Full per-example provenance record, persisted as one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictTrace {
    pub example_id: String,
    pub claim: Claim,
    pub baseline_verdict: Option<Verdict>,
    pub assessments: Vec<FactAssessment>,
    pub judge_verdict: Verdict,
    pub judge_explanation: String,
    pub used_facts: Vec<String>,
    pub regime: Regime,
    pub ablation: Ablation,
}

impl VerdictTrace {
    pub fn check(&self, thresholds: Option<&Thresholds>) -> Result<(), ValidationError> {
        let ids: HashSet<&str> = self.assessments.iter().map(|a| a.fact.id.as_str()).collect();
        if let Some(missing) = self.used_facts.iter().find(|id| !ids.contains(id.as_str())) {
            return Err(ValidationError::Trace(format!("used fact `{missing}` has no assessment")));
        }
        if self.regime == Regime::ContextOnly && self.assessments.iter().any(|a| a.rescored) {
            return Err(ValidationError::Trace("context-only trace contains a rescored assessment".into()));
        }
        for a in &self.assessments {
            a.check(thresholds)?;
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}
