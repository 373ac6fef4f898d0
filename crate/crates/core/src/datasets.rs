//! JSONL loaders mapping each benchmark onto the three-way label space.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::types::Verdict;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
}

/// One claim/document pair with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetExample {
    pub id: String,
    pub claim: String,
    pub document: String,
    pub gold: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum DatasetKind {
    /// Fields: id, claim, context (or abstract), label ∈ {yes, no, maybe}.
    #[value(name = "pubmedfact")]
    #[serde(rename = "pubmedfact")]
    PubMedFact,
    /// Fields: id, hypothesis, abstract (or premise), label ∈ {entailment, contradiction}.
    #[value(name = "bionli")]
    #[serde(rename = "bionli")]
    BioNli,
    /// Fields: claim_id, claim, evidences (strings or {evidence}), claim_label.
    #[value(name = "climatefever", alias = "climate-fever")]
    #[serde(rename = "climate-fever")]
    ClimateFever,
}

pub fn load(kind: DatasetKind, path: &Path) -> Result<Vec<DatasetExample>, LoadError> {
    match kind {
        DatasetKind::PubMedFact => load_pubmedfact(path),
        DatasetKind::BioNli => load_bionli(path),
        DatasetKind::ClimateFever => load_climatefever(path),
    }
}

type Row<'a> = &'a Map<String, Value>;

/// Drives `row` over every nonblank line; `Ok(None)` skips the line.
fn load_jsonl(
    path: &Path,
    mut row: impl FnMut(usize, Row<'_>) -> Result<Option<DatasetExample>, String>,
) -> Result<Vec<DatasetExample>, LoadError> {
    let io = |source| LoadError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let lineno = i + 1;
        let fail = |message: String| LoadError::Line { path: path.to_path_buf(), line: lineno, message };
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| fail(format!("invalid JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| fail("expected a JSON object".into()))?;
        if let Some(ex) = row(lineno, obj).map_err(fail)? {
            if ex.claim.trim().is_empty() {
                return Err(fail("empty claim".into()));
            }
            if ex.document.trim().is_empty() {
                return Err(fail("empty document".into()));
            }
            out.push(ex);
        }
    }
    tracing::debug!(path = %path.display(), examples = out.len(), "dataset loaded");
    Ok(out)
}

fn first<'a>(obj: Row<'a>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k).filter(|v| !v.is_null()))
}

fn text_field(obj: Row<'_>, keys: &[&str]) -> Result<String, String> {
    match first(obj, keys) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Array(parts)) => parts
            .iter()
            .map(|p| p.as_str().map(str::to_string).ok_or_else(|| format!("`{}` must hold strings", keys[0])))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.join(" ")),
        Some(_) => Err(format!("`{}` must be a string", keys[0])),
        None => Err(format!("missing field `{}`", keys.join("` or `"))),
    }
}

fn id_field(obj: Row<'_>, keys: &[&str], prefix: &str, line: usize) -> String {
    match first(obj, keys) {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("{prefix}-{line}"),
    }
}

fn label_string(obj: Row<'_>, keys: &[&str]) -> Result<String, String> {
    match first(obj, keys) {
        Some(Value::String(s)) => Ok(s.trim().to_string()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(format!("`{}` must be a string", keys[0])),
        None => Err(format!("missing field `{}`", keys[0])),
    }
}

pub fn load_pubmedfact(path: &Path) -> Result<Vec<DatasetExample>, LoadError> {
    load_jsonl(path, |line, obj| {
        let label = label_string(obj, &["label", "final_decision"])?;
        let gold = match label.to_lowercase().as_str() {
            "yes" => Verdict::Supported,
            "no" => Verdict::Refuted,
            "maybe" => Verdict::Nei,
            _ => return Err(format!("unknown label `{label}` (expected yes, no or maybe)")),
        };
        Ok(Some(DatasetExample {
            id: id_field(obj, &["id", "pubid"], "pubmedfact", line),
            claim: text_field(obj, &["claim"])?,
            document: text_field(obj, &["context", "abstract"])?,
            gold,
        }))
    })
}

pub fn load_bionli(path: &Path) -> Result<Vec<DatasetExample>, LoadError> {
    load_jsonl(path, |line, obj| {
        let label = label_string(obj, &["label"])?;
        let gold = match label.to_lowercase().as_str() {
            "entailment" => Verdict::Supported,
            "contradiction" => Verdict::Refuted,
            _ => return Err(format!("unknown label `{label}` (expected entailment or contradiction)")),
        };
        Ok(Some(DatasetExample {
            id: id_field(obj, &["id"], "bionli", line),
            claim: text_field(obj, &["hypothesis", "claim"])?,
            document: text_field(obj, &["abstract", "premise"])?,
            gold,
        }))
    })
}

/// Evidence sentences in dataset order; items may be plain strings or
/// objects carrying an `evidence` string.
fn evidence_sentences(obj: Row<'_>) -> Result<Vec<String>, String> {
    let items = first(obj, &["evidences", "evidence", "evidence_sentences"])
        .ok_or("missing evidence list")?
        .as_array()
        .ok_or("evidence must be a list")?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| match item {
            Value::String(s) => Ok(s.clone()),
            Value::Object(o) => o
                .get("evidence")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("evidence[{i}] has no `evidence` string")),
            _ => Err(format!("evidence[{i}] must be a string or object")),
        })
        .collect()
}

pub fn load_climatefever(path: &Path) -> Result<Vec<DatasetExample>, LoadError> {
    load_jsonl(path, |line, obj| {
        let label = label_string(obj, &["claim_label", "label"])?;
        let gold = match label.to_uppercase().as_str() {
            "SUPPORTS" | "0" => Verdict::Supported,
            "REFUTES" | "1" => Verdict::Refuted,
            "NOT_ENOUGH_INFO" | "DISPUTED" | "2" | "3" => return Ok(None),
            _ => return Err(format!("unknown claim label `{label}`")),
        };
        let sentences = evidence_sentences(obj)?;
        Ok(Some(DatasetExample {
            id: id_field(obj, &["claim_id", "id"], "climate-fever", line),
            claim: text_field(obj, &["claim"])?,
            document: sentences.join(" "),
            gold,
        }))
    })
}
