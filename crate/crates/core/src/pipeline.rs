//! Per-example orchestration and dataset runs with streamed traces.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use thiserror::Error;

use crate::aggregate::{apply_conflict_abstention, judge, majority_decision, JudgeDecision};
use crate::config::PipelineConfig;
use crate::corroborate::corroborate_uncertain;
use crate::datasets::DatasetExample;
use crate::decompose::{decompose, single_fact_fallback};
use crate::evidence::chunk_document;
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::providers::Providers;
use crate::types::{Ablation, Claim, EvidenceDoc, Regime, ValidationError, Verdict, VerdictTrace};
use crate::verify::{assess_all, gate, score_fact};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("example `{id}`: {source}")]
    Example {
        id: String,
        #[source]
        source: ValidationError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed trace: {message}")]
    Trace { path: PathBuf, line: usize, message: String },
    #[error("no trace for example `{0}`")]
    MissingTrace(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

struct Inputs {
    claim: Claim,
    doc: EvidenceDoc,
}

fn inputs(example: &DatasetExample) -> Result<Inputs, PipelineError> {
    let wrap = |source| PipelineError::Example { id: example.id.clone(), source };
    Ok(Inputs {
        claim: Claim::new(example.claim.clone()).map_err(wrap)?,
        doc: EvidenceDoc::new(example.document.clone(), example.id.clone()).map_err(wrap)?,
    })
}

/// Runs one example end to end. Provider degradation never fails the call:
/// a decomposition or verifier failure yields an NEI trace whose
/// explanation names the cause. Only malformed input is an error.
pub fn run_pipeline(
    example: &DatasetExample,
    cfg: &PipelineConfig,
    providers: &Providers,
) -> Result<VerdictTrace, PipelineError> {
    let Inputs { claim, doc } = inputs(example)?;
    Ok(run_validated(&example.id, &claim, &doc, cfg, providers))
}

fn run_validated(
    id: &str,
    claim: &Claim,
    doc: &EvidenceDoc,
    cfg: &PipelineConfig,
    providers: &Providers,
) -> VerdictTrace {
    let t = &cfg.thresholds;
    let mut trace = VerdictTrace {
        example_id: id.to_string(),
        claim: claim.clone(),
        baseline_verdict: None,
        assessments: Vec::new(),
        judge_verdict: Verdict::Nei,
        judge_explanation: String::new(),
        used_facts: Vec::new(),
        regime: cfg.regime,
        ablation: cfg.ablation,
    };

    let verifier = providers.verifier();
    match score_fact(claim.text(), doc.text(), &verifier) {
        Ok(p) => trace.baseline_verdict = Some(Verdict::from(gate(p.value(), t))),
        Err(e) => tracing::warn!(example = id, error = %e, "baseline scoring failed"),
    }

    let facts = if cfg.ablation == Ablation::NoAtomic {
        single_fact_fallback(claim)
    } else {
        match decompose(claim, doc, &providers.chat(), t, cfg.retries as usize) {
            Ok(f) => f,
            Err(e) => {
                tracing::warn!(example = id, error = %e, "decomposition failed");
                trace.judge_explanation = format!("Decomposition failed ({e}); abstaining.");
                return trace;
            }
        }
    };

    let chunks = chunk_document(doc, t.max_chunk_chars, cfg.overlap_sentences);
    let embedding = providers.embedding();
    let emb = embedding.as_ref().map(|e| e as &dyn crate::providers::EmbeddingProvider);
    let mut assessments = match assess_all(&facts, &chunks, emb, &verifier, t) {
        Ok(a) => a,
        Err(e) => {
            tracing::warn!(example = id, error = %e, "fact verification failed");
            trace.judge_explanation = format!("Verification failed ({e}); abstaining.");
            return trace;
        }
    };

    if cfg.regime == Regime::ContextWeb {
        match (cfg.corroboration(), providers.search()) {
            (Some(settings), Some(search)) => {
                assessments = corroborate_uncertain(&assessments, &search, &providers.chat(), &verifier, &settings);
            }
            _ => {
                tracing::warn!(example = id, "web regime without search provider or allowlist; skipping corroboration")
            }
        }
    }

    let decision: JudgeDecision = if cfg.ablation == Ablation::MajorityVote {
        apply_conflict_abstention(majority_decision(&assessments), &assessments)
    } else {
        judge(claim, doc, &assessments, &providers.chat(), cfg.task)
    };

    trace.assessments = assessments;
    trace.judge_verdict = decision.final_verdict;
    trace.judge_explanation = decision.explanation;
    trace.used_facts = decision.used_facts;
    trace
}

/// Traces in example order plus the metrics computed from them.
#[derive(Debug, Clone)]
pub struct DatasetRun {
    pub traces: Vec<VerdictTrace>,
    pub report: MetricsReport,
}

/// Runs every example with up to `cfg.parallelism` workers. Traces are
/// written to `trace_out` (if given) as they complete, in example order,
/// one JSON line each.
pub fn run_dataset(
    examples: &[DatasetExample],
    cfg: &PipelineConfig,
    providers: &Providers,
    trace_out: Option<&Path>,
) -> Result<DatasetRun, PipelineError> {
    let validated = examples.iter().map(inputs).collect::<Result<Vec<_>, _>>()?;
    let mut writer = match trace_out {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(io_err(path))?)),
        None => None,
    };

    let next = AtomicUsize::new(0);
    let workers = cfg.parallelism.clamp(1, examples.len().max(1));
    let mut traces: Vec<Option<VerdictTrace>> = vec![None; examples.len()];

    std::thread::scope(|scope| -> Result<(), PipelineError> {
        let (tx, rx) = mpsc::channel::<(usize, VerdictTrace)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, validated) = (&next, &validated);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(inp) = validated.get(i) else { break };
                let trace = run_validated(&examples[i].id, &inp.claim, &inp.doc, cfg, providers);
                if tx.send((i, trace)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, VerdictTrace> = BTreeMap::new();
        let mut written = 0;
        for (i, trace) in rx {
            pending.insert(i, trace);
            while let Some(trace) = pending.remove(&written) {
                if let (Some(w), Some(path)) = (writer.as_mut(), trace_out) {
                    writeln!(w, "{}", trace.to_json_line()).and_then(|_| w.flush()).map_err(io_err(path))?;
                }
                tracing::info!(example = %trace.example_id, verdict = %trace.judge_verdict, "example done");
                traces[written] = Some(trace);
                written += 1;
            }
        }
        Ok(())
    })?;

    let traces: Vec<VerdictTrace> = traces.into_iter().map(|t| t.expect("every example produced a trace")).collect();
    let preds: Vec<Verdict> = traces.iter().map(|t| t.judge_verdict).collect();
    let mut report = evaluate(examples, &preds, cfg.task, cfg.nei_policy)?;
    report.requests = Some(providers.requests());
    Ok(DatasetRun { traces, report })
}

/// Writes `contents` via a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Runs a dataset into `out_dir`: `traces.jsonl`, `metrics.json`, `metrics.txt`.
pub fn run_eval_to_dir(
    examples: &[DatasetExample],
    cfg: &PipelineConfig,
    providers: &Providers,
    out_dir: &Path,
) -> Result<DatasetRun, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let run = run_dataset(examples, cfg, providers, Some(&out_dir.join(TRACES_FILE)))?;
    let json = serde_json::to_vec_pretty(&run.report).expect("report serializes");
    write_atomic(&out_dir.join(METRICS_JSON), &json)?;
    write_atomic(&out_dir.join(METRICS_TXT), run.report.to_table().as_bytes())?;
    Ok(run)
}

pub fn read_traces(path: &Path) -> Result<Vec<VerdictTrace>, PipelineError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = VerdictTrace::from_json_line(&line).map_err(|e| PipelineError::Trace {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(trace);
    }
    Ok(out)
}

/// Recomputes metrics from persisted traces, matched to examples by id.
pub fn metrics_from_traces(
    examples: &[DatasetExample],
    traces: &[VerdictTrace],
    cfg: &PipelineConfig,
) -> Result<MetricsReport, PipelineError> {
    let by_id: HashMap<&str, Verdict> = traces.iter().map(|t| (t.example_id.as_str(), t.judge_verdict)).collect();
    let preds = examples
        .iter()
        .map(|e| by_id.get(e.id.as_str()).copied().ok_or_else(|| PipelineError::MissingTrace(e.id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate(examples, &preds, cfg.task, cfg.nei_policy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corroborate::Allowlist;
    use crate::providers::{FixtureSearch, LexicalVerifier, OfflineChat, ScriptedChat};
    use crate::types::FactLabel;
    use std::sync::Arc;

    fn ex(id: &str, claim: &str, doc: &str, gold: Verdict) -> DatasetExample {
        DatasetExample { id: id.into(), claim: claim.into(), document: doc.into(), gold }
    }

    fn web_cfg() -> PipelineConfig {
        PipelineConfig {
            regime: Regime::ContextWeb,
            allowlist: Some(Allowlist::scientific_default()),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn offline_run_produces_consistent_trace() {
        let e = ex(
            "e1",
            "Aspirin reduces stroke risk and statins lower cholesterol",
            "Aspirin reduces stroke risk in adults. Statins lower cholesterol levels.",
            Verdict::Supported,
        );
        let p = Providers::offline();
        let t = run_pipeline(&e, &PipelineConfig::default(), &p).unwrap();
        assert_eq!(t.assessments.len(), 2);
        assert_eq!(t.judge_verdict, Verdict::Supported);
        assert_eq!(t.baseline_verdict, Some(Verdict::Supported));
        t.check(Some(&PipelineConfig::default().thresholds)).unwrap();
        assert!(p.search().is_none());
    }

    #[test]
    fn no_atomic_keeps_one_fact() {
        let e = ex("e1", "a, b and c are true", "a b", Verdict::Nei);
        let cfg = PipelineConfig { ablation: Ablation::NoAtomic, ..PipelineConfig::default() };
        let p = Providers::offline();
        let t = run_pipeline(&e, &cfg, &p).unwrap();
        assert_eq!(t.assessments.len(), 1);
        assert_eq!(t.assessments[0].fact.text, e.claim);
    }

    #[test]
    fn majority_vote_skips_the_judge() {
        let e = ex("e1", "Aspirin reduces stroke", "Aspirin reduces stroke.", Verdict::Supported);
        let cfg = PipelineConfig { ablation: Ablation::MajorityVote, ..PipelineConfig::default() };
        let chat = Arc::new(ScriptedChat::new([r#"{"facts":[{"id":"f1","text":"aspirin reduces stroke"}]}"#]));
        let p = Providers::new(chat.clone(), None, Arc::new(LexicalVerifier), None);
        let t = run_pipeline(&e, &cfg, &p).unwrap();
        assert_eq!(t.judge_verdict, Verdict::Supported);
        assert_eq!(chat.calls(), 1);
        assert!(chat.prompts().iter().all(|pr| !pr.starts_with("TASK: judge")));
    }

    #[test]
    fn decomposition_failure_yields_nei_trace() {
        let e = ex("e1", "a claim", "a document", Verdict::Supported);
        let chat = Arc::new(ScriptedChat::new(["junk", "junk", "junk"]));
        let p = Providers::new(chat, None, Arc::new(LexicalVerifier), None);
        let t = run_pipeline(&e, &PipelineConfig::default(), &p).unwrap();
        assert_eq!(t.judge_verdict, Verdict::Nei);
        assert!(t.judge_explanation.starts_with("Decomposition failed"));
        assert!(t.assessments.is_empty());
        assert!(t.baseline_verdict.is_some());
    }

    #[test]
    fn web_regime_searches_only_uncertain_facts() {
        // Facts: "aspirin reduces stroke" (1.0) and "statins cure baldness quickly" (2/4 → 0.5).
        let e = ex(
            "e1",
            "Aspirin reduces stroke; statins cure baldness quickly",
            "Aspirin reduces stroke. Statins cure nothing, but are taken quickly.",
            Verdict::Nei,
        );
        let search = Arc::new(FixtureSearch::default());
        let p = Providers::new(Arc::new(OfflineChat::default()), None, Arc::new(LexicalVerifier), None)
            .with_search(search.clone());
        let t = run_pipeline(&e, &web_cfg(), &p).unwrap();
        let uncertain =
            t.assessments.iter().filter(|a| gate(a.p_local, &web_cfg().thresholds) == FactLabel::Uncertain).count();
        assert!(uncertain >= 1);
        assert_eq!(search.calls(), uncertain);
        assert_eq!(p.requests().search, uncertain);
    }

    #[test]
    fn dataset_run_writes_ordered_traces_and_metrics() {
        let examples: Vec<_> = (0..7)
            .map(|i| {
                ex(&format!("x{i}"), &format!("claim number {i} holds"), "claim number holds here.", Verdict::Supported)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { parallelism: 3, ..PipelineConfig::default() };
        let run = run_eval_to_dir(&examples, &cfg, &Providers::offline(), dir.path()).unwrap();
        let persisted = read_traces(&dir.path().join(TRACES_FILE)).unwrap();
        assert_eq!(persisted, run.traces);
        let ids: Vec<_> = persisted.iter().map(|t| t.example_id.clone()).collect();
        assert_eq!(ids, examples.iter().map(|e| e.id.clone()).collect::<Vec<_>>());
        let mut again = metrics_from_traces(&examples, &persisted, &cfg).unwrap();
        again.requests = run.report.requests;
        assert_eq!(again, run.report);
        assert!(dir.path().join(METRICS_JSON).exists() && dir.path().join(METRICS_TXT).exists());
        assert!(matches!(metrics_from_traces(&examples, &persisted[1..], &cfg), Err(PipelineError::MissingTrace(_))));
    }

    #[test]
    fn invalid_examples_are_rejected_up_front() {
        let bad = [ex("e", " ", "doc", Verdict::Nei)];
        assert!(matches!(
            run_dataset(&bad, &PipelineConfig::default(), &Providers::offline(), None),
            Err(PipelineError::Example { .. })
        ));
    }
}
