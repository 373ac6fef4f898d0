//! Claim-level aggregation: judge prompting and parsing, the majority-vote
//! aggregator, deterministic fallback and conflict abstention.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::decompose::REPAIR_INSTRUCTION;
use crate::prompt::{self, TASK_JUDGE};
use crate::providers::ChatProvider;
use crate::types::{Claim, EvidenceDoc, FactAssessment, FactLabel, TaskMode, Verdict};

pub const FALLBACK_PREFIX: &str = "Judge unavailable; majority vote over decisive facts";
pub const MAJORITY_PREFIX: &str = "Majority vote over decisive facts";
pub const CONFLICT_PREFIX: &str = "Abstaining: web evidence contradicts the document on";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("judge response schema error: {0}")]
    Schema(String),
}

/// Parsed claim-level decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeDecision {
    pub final_verdict: Verdict,
    pub explanation: String,
    pub used_facts: Vec<String>,
    /// Ids the judge cited that were never shown to it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_facts: Vec<String>,
    /// Set when the decision came from the deterministic fallback.
    #[serde(default)]
    pub fallback: bool,
}

/// Assessments split by label, each in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition<'a> {
    pub supported: Vec<&'a FactAssessment>,
    pub refuted: Vec<&'a FactAssessment>,
    pub uncertain: Vec<&'a FactAssessment>,
}

impl Partition<'_> {
    /// Ids the judge sees in `mode`.
    pub fn shown_ids(&self, mode: TaskMode) -> Vec<String> {
        let mut ids: Vec<String> = self.supported.iter().chain(&self.refuted).map(|a| a.fact.id.clone()).collect();
        if mode == TaskMode::ThreeWay {
            ids.extend(self.uncertain.iter().map(|a| a.fact.id.clone()));
        }
        ids
    }

    fn decisive_ids(&self) -> Vec<String> {
        self.supported.iter().chain(&self.refuted).map(|a| a.fact.id.clone()).collect()
    }
}

pub fn partition_facts(assessments: &[FactAssessment]) -> Partition<'_> {
    let mut p = Partition::default();
    for a in assessments {
        match a.label {
            FactLabel::Supported => p.supported.push(a),
            FactLabel::Refuted => p.refuted.push(a),
            FactLabel::Uncertain => p.uncertain.push(a),
        }
    }
    p
}

fn fact_entries(items: &[&FactAssessment]) -> Value {
    Value::Array(items.iter().map(|a| json!({"id": a.fact.id, "text": a.fact.text, "p": a.p_final})).collect())
}

/// Deterministic judge prompt. Uncertain facts appear only in three-way mode.
pub fn build_judge_prompt(claim: &Claim, doc: &EvidenceDoc, part: &Partition<'_>, mode: TaskMode) -> String {
    let mut input = json!({
        "claim": claim.text(),
        "document": doc.text(),
        "mode": match mode { TaskMode::TwoWay => "two-way", TaskMode::ThreeWay => "three-way" },
        "supported": fact_entries(&part.supported),
        "refuted": fact_entries(&part.refuted),
    });
    let sets = match mode {
        TaskMode::TwoWay => "Supported facts and Refuted facts",
        TaskMode::ThreeWay => {
            input["uncertain"] = fact_entries(&part.uncertain);
            "Supported facts, Refuted facts and Uncertain facts (evidence did not decide them)"
        }
    };
    format!(
        "{task}\n\
         You decide whether a claim is supported by a document. The claim was split into atomic facts, \
         each checked against the document and scored with a support probability p. You are given {sets}. \
         Weigh them against the claim and the document. \
         Reply with strict JSON containing exactly the fields \"final_verdict\" (one of \"Supported\", \"Refuted\", \"NEI\"), \
         \"explanation\" (a short rationale referencing fact ids) and \"used_facts\" (the ids of the facts you relied on).\n\
         {input}",
        task = prompt::task_line(TASK_JUDGE),
        input = prompt::input_line(&input),
    )
}

/// Parses the judge's JSON; ids outside `shown_ids` move to `dropped_facts`.
pub fn parse_judge_response(raw: &str, shown_ids: &[String]) -> Result<JudgeDecision, JudgeError> {
    let schema = |m: String| JudgeError::Schema(m);
    let v: Value =
        serde_json::from_str(prompt::strip_code_fence(raw)).map_err(|e| schema(format!("malformed JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| schema("top level is not an object".into()))?;
    let verdict_raw = obj
        .get("final_verdict")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("final_verdict missing or not a string".into()))?;
    let final_verdict =
        Verdict::parse_loose(verdict_raw).ok_or_else(|| schema(format!("unknown verdict `{verdict_raw}`")))?;
    let explanation = obj
        .get("explanation")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("explanation missing or not a string".into()))?
        .to_string();
    let listed = obj
        .get("used_facts")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("used_facts missing or not an array".into()))?;
    let mut used_facts = Vec::new();
    let mut dropped_facts = Vec::new();
    for item in listed {
        let id = item.as_str().ok_or_else(|| schema("used_facts must hold strings".into()))?.to_string();
        if shown_ids.contains(&id) {
            if !used_facts.contains(&id) {
                used_facts.push(id);
            }
        } else {
            tracing::warn!(%id, "judge cited an unknown fact id");
            dropped_facts.push(id);
        }
    }
    Ok(JudgeDecision { final_verdict, explanation, used_facts, dropped_facts, fallback: false })
}

/// Strict majority of Supported over Refuted labels; ties (including none) give NEI.
pub fn majority_vote(assessments: &[FactAssessment]) -> Verdict {
    let s = assessments.iter().filter(|a| a.label == FactLabel::Supported).count();
    let r = assessments.iter().filter(|a| a.label == FactLabel::Refuted).count();
    match s.cmp(&r) {
        std::cmp::Ordering::Greater => Verdict::Supported,
        std::cmp::Ordering::Less => Verdict::Refuted,
        std::cmp::Ordering::Equal => Verdict::Nei,
    }
}

fn vote_decision(assessments: &[FactAssessment], prefix: &str, fallback: bool) -> JudgeDecision {
    let part = partition_facts(assessments);
    let ids = part.decisive_ids();
    let verdict = majority_vote(assessments);
    let listing = if ids.is_empty() { "none".to_string() } else { ids.join(", ") };
    JudgeDecision {
        final_verdict: verdict,
        explanation: format!(
            "{prefix} ({} supported, {} refuted; decisive: {listing}) → {verdict}",
            part.supported.len(),
            part.refuted.len()
        ),
        used_facts: ids,
        dropped_facts: Vec::new(),
        fallback,
    }
}

/// Majority-vote decision used when the judge cannot be reached or parsed.
pub fn deterministic_fallback(assessments: &[FactAssessment]) -> JudgeDecision {
    vote_decision(assessments, FALLBACK_PREFIX, true)
}

/// Majority-vote decision for the judge-free ablation.
pub fn majority_decision(assessments: &[FactAssessment]) -> JudgeDecision {
    vote_decision(assessments, MAJORITY_PREFIX, false)
}

/// Any conflicting fact forces NEI with a note naming the conflicts.
/// Applying it twice changes nothing further.
pub fn apply_conflict_abstention(decision: JudgeDecision, assessments: &[FactAssessment]) -> JudgeDecision {
    let conflicting: Vec<&str> = assessments.iter().filter(|a| a.conflict).map(|a| a.fact.id.as_str()).collect();
    if conflicting.is_empty() {
        return decision;
    }
    let note = format!("{CONFLICT_PREFIX} {}.", conflicting.join(", "));
    let explanation = if decision.explanation.starts_with(&note) {
        decision.explanation
    } else if decision.explanation.is_empty() {
        note
    } else {
        format!("{note} {}", decision.explanation)
    };
    JudgeDecision { final_verdict: Verdict::Nei, explanation, ..decision }
}

/// Partition, prompt, parse with one repair retry, fall back to majority
/// vote if the judge still fails, then apply conflict abstention.
pub fn judge(
    claim: &Claim,
    doc: &EvidenceDoc,
    assessments: &[FactAssessment],
    chat: &dyn ChatProvider,
    mode: TaskMode,
) -> JudgeDecision {
    let part = partition_facts(assessments);
    let shown = part.shown_ids(mode);
    let base = build_judge_prompt(claim, doc, &part, mode);
    let mut prompt_text = base.clone();
    let mut decision = None;
    for attempt in 1..=2 {
        match chat.complete(&prompt_text, true) {
            Ok(raw) => match parse_judge_response(&raw, &shown) {
                Ok(d) => {
                    decision = Some(d);
                    break;
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "judge reply rejected");
                    prompt_text = format!("{base}\n{REPAIR_INSTRUCTION}");
                }
            },
            Err(e) => tracing::warn!(attempt, error = %e, "judge call failed"),
        }
    }
    let decision = decision.unwrap_or_else(|| deterministic_fallback(assessments));
    apply_conflict_abstention(decision, assessments)
}
