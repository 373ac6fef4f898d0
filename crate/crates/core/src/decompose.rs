//! Claim decomposition into atomic facts via a chat provider in JSON mode.

use std::collections::HashSet;

use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::{self, TASK_DECOMPOSE};
use crate::providers::ChatProvider;
use crate::types::{fact_word_count, AtomicFact, Claim, EvidenceDoc, Thresholds};

pub const REPAIR_INSTRUCTION: &str =
    "Your previous reply could not be parsed. Return only valid JSON matching the schema.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecompositionError {
    #[error("decomposition response does not match the schema: {0}")]
    Schema(String),
    #[error("decomposition produced no usable facts")]
    Empty,
    #[error("decomposition failed after {attempts} attempt(s): {reason}")]
    Failed { attempts: usize, reason: String, last_raw: String },
}

/// Validated atomic facts plus the provider output they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FactSet {
    pub facts: Vec<AtomicFact>,
    pub raw_response: String,
}

impl FactSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.facts.iter().map(|f| f.id.as_str())
    }
}

pub fn build_decomposition_prompt(claim: &Claim, doc: &EvidenceDoc, max_words: usize) -> String {
    let input = json!({
        "claim": claim.text(),
        "document": doc.text(),
        "max_words": max_words,
    });
    format!(
        "{task}\n\
         Decompose the claim into atomic facts. Each fact expresses exactly one predicate-argument tuple, \
         is self-contained, and has at most {max_words} words.\n\
         Use the document only to resolve references in the claim; do not add facts the claim does not state.\n\
         In \"targets\", list the entities or terms each fact is about.\n\
         Return a single JSON object with a top-level \"facts\" array and nothing else: \
         facts[{{id, text, targets}}], i.e. {{\"facts\": [{{\"id\": string, \"text\": string, \"targets\": [string]}}]}}.\n\
         The claim and the document are given as JSON string values below.\n\
         {input}",
        task = prompt::task_line(TASK_DECOMPOSE),
        input = prompt::input_line(&input),
    )
}

pub fn parse_decomposition_response(raw: &str) -> Result<FactSet, DecompositionError> {
    let schema = |m: &str| DecompositionError::Schema(m.to_string());
    let value: Value = serde_json::from_str(prompt::strip_code_fence(raw))
        .map_err(|e| DecompositionError::Schema(format!("malformed JSON: {e}")))?;
    let items = value
        .get("facts")
        .ok_or_else(|| schema("missing `facts`"))?
        .as_array()
        .ok_or_else(|| schema("`facts` is not an array"))?;
    if items.is_empty() {
        return Err(DecompositionError::Empty);
    }

    let mut facts = Vec::with_capacity(items.len());
    let mut ids_ok = true;
    let mut seen = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        let text =
            item.get("text").and_then(Value::as_str).filter(|t| !t.trim().is_empty()).ok_or_else(|| {
                DecompositionError::Schema(format!("facts[{i}].text missing or not a nonempty string"))
            })?;
        let targets = match item.get("targets") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(ts)) => ts
                .iter()
                .map(|t| t.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| DecompositionError::Schema(format!("facts[{i}].targets must hold strings")))?,
            Some(_) => return Err(DecompositionError::Schema(format!("facts[{i}].targets is not an array"))),
        };
        let id = match item.get("id") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
            Some(Value::Number(n)) => n.to_string(),
            _ => String::new(),
        };
        if id.is_empty() || !seen.insert(id.clone()) {
            ids_ok = false;
        }
        facts.push(AtomicFact::new(id, text.trim(), targets));
    }
    if !ids_ok {
        resequence(&mut facts);
    }
    Ok(FactSet { facts, raw_response: raw.to_string() })
}

fn resequence(facts: &mut [AtomicFact]) {
    for (i, f) in facts.iter_mut().enumerate() {
        f.id = format!("f{}", i + 1);
    }
}

fn dedup_key(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Drops over-long facts, removes duplicate texts (case and whitespace
/// insensitive, first occurrence kept) and renumbers ids `f1..fn`.
pub fn enforce_fact_constraints(fs: FactSet, max_words: usize) -> Result<FactSet, DecompositionError> {
    let mut seen = HashSet::new();
    let mut facts: Vec<AtomicFact> = fs
        .facts
        .into_iter()
        .filter(|f| {
            let n = fact_word_count(&f.text);
            n >= 1 && n <= max_words
        })
        .filter(|f| seen.insert(dedup_key(&f.text)))
        .collect();
    if facts.is_empty() {
        return Err(DecompositionError::Empty);
    }
    resequence(&mut facts);
    Ok(FactSet { facts, raw_response: fs.raw_response })
}

/// Prompt → provider → parse → enforce. A schema failure triggers a
/// reissue with [`REPAIR_INSTRUCTION`] appended, up to `retries` times.
pub fn decompose(
    claim: &Claim,
    doc: &EvidenceDoc,
    chat: &dyn ChatProvider,
    t: &Thresholds,
    retries: usize,
) -> Result<FactSet, DecompositionError> {
    let base = build_decomposition_prompt(claim, doc, t.max_fact_words);
    let attempts = retries + 1;
    let mut prompt = base.clone();
    let mut last_raw = String::new();
    let mut reason = String::new();
    for attempt in 1..=attempts {
        match chat.complete(&prompt, true) {
            Ok(raw) => {
                last_raw = raw;
                match parse_decomposition_response(&last_raw) {
                    Ok(fs) => return enforce_fact_constraints(fs, t.max_fact_words),
                    Err(DecompositionError::Schema(msg)) => {
                        tracing::debug!(attempt, %msg, "decomposition schema error");
                        reason = msg;
                        prompt = format!("{base}\n\n{REPAIR_INSTRUCTION}");
                    }
                    Err(other) => return Err(other),
                }
            }
            Err(e) => {
                tracing::debug!(attempt, error = %e, "decomposition provider error");
                reason = e.to_string();
            }
        }
    }
    Err(DecompositionError::Failed { attempts, reason, last_raw })
}

/// The whole claim as a single fact, exempt from the word cap.
pub fn single_fact_fallback(claim: &Claim) -> FactSet {
    FactSet { facts: vec![AtomicFact::new("f1", claim.text(), Vec::new())], raw_response: String::new() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ScriptedChat;
    use proptest::prelude::*;

    fn claim(s: &str) -> Claim {
        Claim::new(s).unwrap()
    }

    fn doc(s: &str) -> EvidenceDoc {
        EvidenceDoc::new(s, "d").unwrap()
    }

    fn facts(texts: &[&str]) -> FactSet {
        FactSet {
            facts: texts.iter().enumerate().map(|(i, t)| AtomicFact::new(format!("x{i}"), *t, vec![])).collect(),
            raw_response: String::new(),
        }
    }

    const VALID: &str =
        r#"{"facts":[{"id":"f1","text":"aspirin reduces stroke risk","targets":["aspirin","stroke"]}]}"#;

    #[test]
    fn prompt_contents() {
        let p = build_decomposition_prompt(&claim("X"), &doc("Y"), 25);
        assert!(p.contains("\"claim\":\"X\""));
        assert!(p.contains("\"document\":\"Y\""));
        assert!(p.contains("at most 25 words"));
        assert!(p.contains("facts[{id, text, targets}]"));
        assert_eq!(p, build_decomposition_prompt(&claim("X"), &doc("Y"), 25));
    }

    #[test]
    fn prompt_escapes_quotes() {
        let p = build_decomposition_prompt(&claim(r#"the "so-called" effect"#), &doc("Y"), 25);
        let (_, input) = prompt::parse_framed(&p).unwrap();
        assert_eq!(input["claim"], r#"the "so-called" effect"#);
    }

    #[test]
    fn parse_valid_empty_and_garbage() {
        let fs = parse_decomposition_response(VALID).unwrap();
        assert_eq!(fs.facts.len(), 1);
        assert_eq!(fs.facts[0].targets, ["aspirin", "stroke"]);
        assert_eq!(parse_decomposition_response(r#"{"facts":[]}"#), Err(DecompositionError::Empty));
        assert!(matches!(parse_decomposition_response("not json"), Err(DecompositionError::Schema(_))));
        assert!(matches!(parse_decomposition_response(r#"{"facts":{}}"#), Err(DecompositionError::Schema(_))));
        assert!(matches!(parse_decomposition_response(r#"{"fact":[]}"#), Err(DecompositionError::Schema(_))));
    }

    #[test]
    fn parse_fills_missing_or_duplicate_ids_and_targets() {
        let fs = parse_decomposition_response(
            r#"{"facts":[{"id":"a","text":"one"},{"id":"a","text":"two","extra":1},{"text":"three"}]}"#,
        )
        .unwrap();
        let ids: Vec<_> = fs.ids().collect();
        assert_eq!(ids, ["f1", "f2", "f3"]);
        assert!(fs.facts.iter().all(|f| f.targets.is_empty()));
    }

    #[test]
    fn thirty_word_fact_is_dropped() {
        let long = (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        assert_eq!(fact_word_count(&long), 30);
        let out = enforce_fact_constraints(facts(&["a b", &long, "c d"]), 25).unwrap();
        let texts: Vec<_> = out.facts.iter().map(|f| f.text.as_str()).collect();
        assert_eq!(texts, ["a b", "c d"]);
    }

    #[test]
    fn duplicates_removed_and_ids_resequenced() {
        let out = enforce_fact_constraints(facts(&["Aspirin  works", "aspirin works", "other"]), 25).unwrap();
        assert_eq!(out.facts.len(), 2);
        assert_eq!(out.facts[0].text, "Aspirin  works");
        let ids: Vec<_> = out.ids().collect();
        assert_eq!(ids, ["f1", "f2"]);
        let all_long = facts(&["a b c"]);
        assert_eq!(enforce_fact_constraints(all_long, 2), Err(DecompositionError::Empty));
    }

    #[test]
    fn decompose_happy_and_repair_paths() {
        let (c, d, t) = (claim("c"), doc("d"), Thresholds::default());
        let chat = ScriptedChat::new([VALID]);
        assert_eq!(decompose(&c, &d, &chat, &t, 0).unwrap().facts.len(), 1);
        assert_eq!(chat.calls(), 1);

        let chat = ScriptedChat::new(["garbage", VALID]);
        let fs = decompose(&c, &d, &chat, &t, 1).unwrap();
        assert_eq!(fs.raw_response, VALID);
        let prompts = chat.prompts();
        assert!(!prompts[0].contains(REPAIR_INSTRUCTION));
        assert!(prompts[1].ends_with(REPAIR_INSTRUCTION));
    }

    #[test]
    fn decompose_gives_up_after_retries_plus_one_calls() {
        let chat = ScriptedChat::new(["garbage"; 10]);
        let err = decompose(&claim("c"), &doc("d"), &chat, &Thresholds::default(), 2).unwrap_err();
        assert_eq!(chat.calls(), 3);
        match err {
            DecompositionError::Failed { attempts, last_raw, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(last_raw, "garbage");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_fact_fallback_wraps_whole_claim() {
        let fs = single_fact_fallback(&claim("X causes Y"));
        assert_eq!(fs.facts, vec![AtomicFact::new("f1", "X causes Y", vec![])]);
        let long = (0..40).map(|_| "w").collect::<Vec<_>>().join(" ");
        assert_eq!(single_fact_fallback(&claim(&long)).facts[0].word_count(), 40);
        assert!(Claim::new("").is_err());
    }

    proptest! {
        #[test]
        fn enforcement_is_idempotent(texts in prop::collection::vec("[a-c ]{0,12}", 1..8), cap in 1usize..4) {
            let fs = FactSet {
                facts: texts.iter().enumerate().map(|(i, t)| AtomicFact::new(format!("{i}"), t.clone(), vec![])).collect(),
                raw_response: String::new(),
            };
            if let Ok(once) = enforce_fact_constraints(fs, cap) {
                prop_assert!(once.facts.iter().all(|f| fact_word_count(&f.text) <= cap));
                let twice = enforce_fact_constraints(once.clone(), cap).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
