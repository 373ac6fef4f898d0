use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use atomcheck::config::{build_providers, build_providers_with_transport, load_config, PipelineConfig};
use atomcheck::datasets::load_bionli;
use atomcheck::pipeline::{read_traces, run_eval_to_dir, METRICS_JSON, METRICS_TXT, TRACES_FILE};
use atomcheck::providers::http::{HttpResponse, Transport};
use atomcheck::providers::{ChatProvider, HashEmbedder, LexicalVerifier, OfflineChat, VerifierProvider};
use atomcheck::types::Regime;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn offline_eval_writes_consistent_artifacts() {
    let examples = load_bionli(&fixture("eval12.jsonl")).unwrap();
    let cfg = load_config(&fixture("offline.json")).unwrap();
    let providers = build_providers(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = run_eval_to_dir(&examples, &cfg, &providers, dir.path()).unwrap();

    let traces = read_traces(&dir.path().join(TRACES_FILE)).unwrap();
    assert_eq!(traces, run.traces);
    let ids: Vec<_> = traces.iter().map(|t| t.example_id.as_str()).collect();
    let expected: Vec<_> = examples.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, expected, "traces keep dataset order despite parallel workers");
    for t in &traces {
        t.check(Some(&cfg.thresholds)).unwrap();
        assert!(t.assessments.iter().all(|a| !a.rescored && a.citations.is_empty()));
        assert!(t.baseline_verdict.is_some());
    }

    let metrics: Value = serde_json::from_slice(&std::fs::read(dir.path().join(METRICS_JSON)).unwrap()).unwrap();
    for key in ["accuracy", "balanced_accuracy", "macro_f1", "per_class", "confusion", "requests"] {
        assert!(metrics.get(key).is_some(), "metrics.json lacks {key}");
    }
    assert_eq!(metrics["requests"]["search"], 0);
    let table = std::fs::read_to_string(dir.path().join(METRICS_TXT)).unwrap();
    assert!(table.contains("balanced accuracy"), "{table}");
}

#[test]
fn web_regime_only_searches_uncertain_facts() {
    let examples = load_bionli(&fixture("eval12.jsonl")).unwrap();
    let cfg = load_config(&fixture("web.json")).unwrap();
    let providers = build_providers(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = run_eval_to_dir(&examples, &cfg, &providers, dir.path()).unwrap();
    let band = |p: f64| p > cfg.thresholds.lo && p < cfg.thresholds.hi;
    let uncertain = run.traces.iter().flat_map(|t| &t.assessments).filter(|a| band(a.p_local)).count();
    assert_eq!(run.report.requests.unwrap().search as usize, uncertain);
    for a in run.traces.iter().flat_map(|t| &t.assessments) {
        if a.rescored {
            assert!(band(a.p_local));
            assert!(a.citations.iter().all(|c| !c.contains("evil")), "{:?}", a.citations);
        }
    }
}

/// Serves the HTTP backends from the offline implementations and counts calls.
struct OfflineServer {
    calls: AtomicUsize,
    chat: OfflineChat,
    embedder: HashEmbedder,
}

impl Transport for OfflineServer {
    fn post(&self, url: &str, _headers: &[(String, String)], body: &[u8]) -> Result<HttpResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let req: Value = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let reply = if url.ends_with("/chat/completions") {
            let prompt = req["messages"][0]["content"].as_str().unwrap();
            let content = self.chat.complete(prompt, true).map_err(|e| e.to_string())?;
            json!({"choices": [{"message": {"content": content}}]})
        } else if url.ends_with("/embeddings") {
            let data: Vec<Value> = req["input"]
                .as_array()
                .unwrap()
                .iter()
                .enumerate()
                .map(|(i, t)| json!({"index": i, "embedding": self.embedder.embed_one(t.as_str().unwrap())}))
                .collect();
            json!({ "data": data })
        } else if url.ends_with("/verify") {
            let p = LexicalVerifier
                .score(req["claim"].as_str().unwrap(), req["evidence"].as_str().unwrap())
                .map_err(|e| e.to_string())?;
            json!({ "probability": p })
        } else {
            json!({ "results": [] })
        };
        Ok(HttpResponse { status: 200, body: serde_json::to_vec(&reply).unwrap() })
    }
}

#[test]
fn warm_cache_rerun_makes_no_network_calls() {
    let examples = load_bionli(&fixture("eval12.jsonl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let text = json!({
        "regime": "context-web",
        "allowlist": ["nih.gov"],
        "cache_dir": "cache",
        "parallelism": 3,
        "providers": {
            "chat": {"backend": "http", "base_url": "http://llm.test/v1", "model": "m"},
            "embedding": {"backend": "http", "base_url": "http://llm.test/v1", "model": "e"},
            "verifier": {"backend": "http", "url": "http://nli.test/verify"},
            "search": {"backend": "http", "url": "http://search.test/search"}
        }
    })
    .to_string();
    let (cfg, warnings) = PipelineConfig::from_json_str(&text, Some(dir.path())).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(cfg.regime, Regime::ContextWeb);

    let server = Arc::new(OfflineServer {
        calls: AtomicUsize::new(0),
        chat: OfflineChat::default(),
        embedder: HashEmbedder::default(),
    });
    let cold = build_providers_with_transport(&cfg, server.clone()).unwrap();
    let first = run_eval_to_dir(&examples, &cfg, &cold, &dir.path().join("cold")).unwrap();
    let cold_calls = server.calls.load(Ordering::SeqCst);
    assert!(cold_calls > 0);

    let warm = build_providers_with_transport(&cfg, server.clone()).unwrap();
    let second = run_eval_to_dir(&examples, &cfg, &warm, &dir.path().join("warm")).unwrap();
    assert_eq!(server.calls.load(Ordering::SeqCst), cold_calls, "warm run reached the transport");
    assert_eq!(first.traces, second.traces);
    assert_eq!(
        std::fs::read(dir.path().join("cold").join(TRACES_FILE)).unwrap(),
        std::fs::read(dir.path().join("warm").join(TRACES_FILE)).unwrap()
    );
}
