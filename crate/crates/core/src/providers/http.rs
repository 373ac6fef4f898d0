//! JSON-over-HTTP backends.
//!
//! All backends share an [`HttpClient`] that applies bounded retries with
//! exponential backoff and a global in-flight limit. The byte-level
//! [`Transport`] is pluggable so tests can count and script network calls.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    check_embed_input, check_verifier_input, ChatProvider, EmbeddingProvider, ProviderError, SearchProvider,
    SearchResult, VerifierProvider,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

pub trait Transport: Send + Sync {
    /// POSTs `body` as `application/json`. `Err` means no response was received.
    fn post(&self, url: &str, headers: &[(String, String)], body: &[u8]) -> Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post(&self, url: &str, headers: &[(String, String)], body: &[u8]) -> Result<HttpResponse, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Clone)]
pub struct HttpClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    limiter: Arc<InFlightLimiter>,
}

impl HttpClient {
    pub fn new(transport: Arc<dyn Transport>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self { transport, retry, limiter: Arc::new(InFlightLimiter::new(max_in_flight)) }
    }

    /// Retries transport failures, 429 and 5xx; every attempt sends the
    /// same bytes.
    pub fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<Value, ProviderError> {
        let bytes = serde_json::to_vec(body).expect("request serializes");
        let attempts = self.retry.max_attempts.max(1);
        let mut last = ProviderError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.post(url, headers, &bytes)
            };
            match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_slice(&resp.body)
                        .map_err(|e| ProviderError::Protocol(format!("response from {url} is not JSON: {e}")));
                }
                Ok(resp) => {
                    let err = ProviderError::Status {
                        status: resp.status,
                        body: String::from_utf8_lossy(&resp.body).chars().take(200).collect(),
                    };
                    if resp.status != 429 && resp.status < 500 {
                        return Err(err);
                    }
                    last = err;
                }
                Err(e) => last = ProviderError::Transport(e),
            }
            tracing::debug!(url, attempt, error = %last, "request failed");
        }
        Err(last)
    }
}

fn auth_headers(api_key: &Option<String>) -> Vec<(String, String)> {
    api_key.iter().map(|k| ("Authorization".to_string(), format!("Bearer {k}"))).collect()
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

/// Chat-completions style endpoint, temperature 0.
pub struct HttpChat {
    client: HttpClient,
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChat {
    pub fn new(
        client: HttpClient,
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        Self { client, base_url: base_url.into(), model: model.into(), api_key }
    }
}

impl ChatProvider for HttpChat {
    fn complete(&self, prompt: &str, json_mode: bool) -> Result<String, ProviderError> {
        if prompt.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty prompt".into()));
        }
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        if json_mode {
            body["response_format"] = json!({"type": "json_object"});
        }
        let url = join_url(&self.base_url, "chat/completions");
        let resp = self.client.post_json(&url, &auth_headers(&self.api_key), &body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Protocol("chat response lacks choices[0].message.content".into()))
    }

    fn identity(&self) -> String {
        format!("chat:{}@{}", self.model, self.base_url)
    }
}

/// Embeddings endpoint: `{"model", "input": [..]}` → `{"data": [{"index", "embedding"}]}`.
pub struct HttpEmbedder {
    client: HttpClient,
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(
        client: HttpClient,
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        Self { client, base_url: base_url.into(), model: model.into(), api_key }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        check_embed_input(texts)?;
        let url = join_url(&self.base_url, "embeddings");
        let body = json!({"model": self.model, "input": texts});
        let resp = self.client.post_json(&url, &auth_headers(&self.api_key), &body)?;
        let data =
            resp["data"].as_array().ok_or_else(|| ProviderError::Protocol("embedding response lacks `data`".into()))?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let vec: Vec<f64> = serde_json::from_value(item["embedding"].clone())
                .map_err(|e| ProviderError::Protocol(format!("bad embedding at {idx}: {e}")))?;
            let slot = out
                .get_mut(idx)
                .ok_or_else(|| ProviderError::Protocol(format!("embedding index {idx} out of range")))?;
            *slot = Some(vec);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| ProviderError::Protocol(format!("missing embedding {i}"))))
            .collect()
    }

    fn identity(&self) -> String {
        format!("embedding:{}@{}", self.model, self.base_url)
    }
}

/// Verifier endpoint: `{"claim", "evidence"}` → `{"probability"}`.
pub struct HttpVerifier {
    client: HttpClient,
    url: String,
    api_key: Option<String>,
}

impl HttpVerifier {
    pub fn new(client: HttpClient, url: impl Into<String>, api_key: Option<String>) -> Self {
        Self { client, url: url.into(), api_key }
    }
}

impl VerifierProvider for HttpVerifier {
    fn score(&self, claim: &str, evidence: &str) -> Result<f64, ProviderError> {
        check_verifier_input(claim, evidence)?;
        let body = json!({"claim": claim, "evidence": evidence});
        let resp = self.client.post_json(&self.url, &auth_headers(&self.api_key), &body)?;
        resp["probability"]
            .as_f64()
            .ok_or_else(|| ProviderError::Protocol("verifier response lacks numeric `probability`".into()))
    }

    fn identity(&self) -> String {
        format!("verifier@{}", self.url)
    }
}

/// Search endpoint: `{"query", "limit", "sites"?}` → `{"results": [..]}` or a bare list.
pub struct HttpSearch {
    client: HttpClient,
    url: String,
    api_key: Option<String>,
}

impl HttpSearch {
    pub fn new(client: HttpClient, url: impl Into<String>, api_key: Option<String>) -> Self {
        Self { client, url: url.into(), api_key }
    }
}

impl SearchProvider for HttpSearch {
    fn search(
        &self,
        query: &str,
        limit: usize,
        site_hints: Option<&[String]>,
    ) -> Result<Vec<SearchResult>, ProviderError> {
        if query.trim().is_empty() || limit == 0 {
            return Err(ProviderError::InvalidInput("search needs a query and limit >= 1".into()));
        }
        let mut body = json!({"query": query, "limit": limit});
        if let Some(sites) = site_hints {
            body["sites"] = json!(sites);
        }
        let resp = self.client.post_json(&self.url, &auth_headers(&self.api_key), &body)?;
        let list = match resp {
            Value::Array(_) => resp,
            Value::Object(mut map) => map
                .remove("results")
                .ok_or_else(|| ProviderError::Protocol("search response lacks `results`".into()))?,
            _ => return Err(ProviderError::Protocol("search response is not a list".into())),
        };
        let mut results: Vec<SearchResult> =
            serde_json::from_value(list).map_err(|e| ProviderError::Protocol(format!("search results: {e}")))?;
        results.truncate(limit);
        Ok(results)
    }

    fn identity(&self) -> String {
        format!("search@{}", self.url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Scripted transport that records every request body.
    struct MockTransport {
        replies: Mutex<VecDeque<Result<HttpResponse, String>>>,
        bodies: Mutex<Vec<Vec<u8>>>,
    }

    impl MockTransport {
        fn new(replies: Vec<Result<HttpResponse, String>>) -> Arc<Self> {
            Arc::new(Self { replies: Mutex::new(replies.into()), bodies: Mutex::default() })
        }
    }

    impl Transport for MockTransport {
        fn post(&self, _url: &str, _h: &[(String, String)], body: &[u8]) -> Result<HttpResponse, String> {
            self.bodies.lock().unwrap().push(body.to_vec());
            self.replies.lock().unwrap().pop_front().unwrap_or(Err("no reply".into()))
        }
    }

    fn ok(v: Value) -> Result<HttpResponse, String> {
        Ok(HttpResponse { status: 200, body: v.to_string().into_bytes() })
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay: Duration::ZERO }
    }

    #[test]
    fn verifier_passes_probability_through() {
        let t = MockTransport::new(vec![ok(json!({"probability": 0.73}))]);
        let v = HttpVerifier::new(HttpClient::new(t.clone(), fast(), 8), "http://v/score", None);
        assert_eq!(v.score("c", "e").unwrap(), 0.73);
        let sent: Value = serde_json::from_slice(&t.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent, json!({"claim": "c", "evidence": "e"}));
    }

    #[test]
    fn retries_are_bounded_and_byte_identical() {
        let t = MockTransport::new(vec![
            Err("reset".into()),
            Ok(HttpResponse { status: 503, body: vec![] }),
            Err("reset".into()),
            ok(json!({"probability": 0.1})),
        ]);
        let v = HttpVerifier::new(HttpClient::new(t.clone(), fast(), 8), "http://v", None);
        assert!(matches!(v.score("c", "e"), Err(ProviderError::Transport(_))));
        let bodies = t.bodies.lock().unwrap();
        assert_eq!(bodies.len(), 3);
        assert!(bodies.iter().all(|b| b == &bodies[0]));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = MockTransport::new(vec![Ok(HttpResponse { status: 401, body: b"nope".to_vec() })]);
        let chat = HttpChat::new(HttpClient::new(t.clone(), fast(), 8), "http://c/v1", "m", Some("k".into()));
        assert!(matches!(chat.complete("hi", true), Err(ProviderError::Status { status: 401, .. })));
        assert_eq!(t.bodies.lock().unwrap().len(), 1);
    }

    #[test]
    fn chat_requests_json_mode_and_reads_content() {
        let t = MockTransport::new(vec![ok(json!({"choices": [{"message": {"content": "{\"facts\":[]}"}}]}))]);
        let chat = HttpChat::new(HttpClient::new(t.clone(), fast(), 8), "http://c/v1/", "m", None);
        assert_eq!(chat.complete("hi", true).unwrap(), "{\"facts\":[]}");
        let sent: Value = serde_json::from_slice(&t.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["response_format"]["type"], "json_object");
        assert_eq!(sent["temperature"], 0);
    }

    #[test]
    fn embeddings_are_reordered_by_index() {
        let t = MockTransport::new(vec![ok(json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]}
        ]}))]);
        let e = HttpEmbedder::new(HttpClient::new(t, fast(), 8), "http://e", "m", None);
        let v = e.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn search_accepts_wrapped_or_bare_lists() {
        let hit = json!({"url": "https://www.nih.gov/a", "title": "t", "snippet": "s"});
        let t = MockTransport::new(vec![ok(json!({"results": [hit, hit, hit]})), ok(json!([hit]))]);
        let s = HttpSearch::new(HttpClient::new(t.clone(), fast(), 8), "http://s", None);
        assert_eq!(s.search("q", 2, Some(&["nih.gov".into()])).unwrap().len(), 2);
        assert_eq!(s.search("q", 2, None).unwrap().len(), 1);
        let sent: Value = serde_json::from_slice(&t.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["sites"], json!(["nih.gov"]));
    }

    #[test]
    fn verifier_rejects_malformed_response() {
        let t = MockTransport::new(vec![ok(json!({"score": 0.5}))]);
        let v = HttpVerifier::new(HttpClient::new(t, fast(), 8), "http://v", None);
        assert!(matches!(v.score("c", "e"), Err(ProviderError::Protocol(_))));
    }
}
