//! Generation over a chat-completion backend.
//!
//! [`Gateway`] wraps any [`Backend`] with the retry policy and bounded
//! batch parallelism. Two backends ship with the crate: [`MockBackend`],
//! which answers from a script keyed by prompt fingerprint, and (behind the
//! `http` feature) [`HttpBackend`] for OpenAI-style endpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.4;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 2048;
pub const API_KEY_ENV: &str = "CRAG_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("transport failure: {message}")]
    Transport { message: String },
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("server error: HTTP {status}")]
    Server { status: u16 },
    #[error("authentication failed: {message}")]
    Auth { message: String },
    #[error("backend rejected the request: {message}")]
    Backend { status: Option<u16>, message: String },
    #[error("unreadable backend response: {message}")]
    InvalidResponse { message: String },
    #[error("invalid generation parameters: {message}")]
    InvalidParams { message: String },
}

impl GatewayError {
    /// Only transport-class failures are retried.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. } | GatewayError::RateLimited | GatewayError::Server { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    #[default]
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub decoding: Decoding,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            decoding: Decoding::Greedy,
            seed: None,
        }
    }
}

impl GenerationParams {
    /// Temperature actually sent to the backend; greedy decoding forces 0.
    pub fn effective_temperature(&self) -> f64 {
        match self.decoding {
            Decoding::Greedy => 0.0,
            Decoding::Sampled => self.temperature,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidParams {
                message: format!("temperature must be a finite value >= 0, got {}", self.temperature),
            });
        }
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidParams {
                message: "max_new_tokens must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    pub backend_id: String,
    pub latency_ms: u64,
    pub retries: u32,
}

/// A single-attempt generation backend. Retries live in [`Gateway`].
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<BackendReply, GatewayError>;
}

/// Platform-stable SHA-256 hex digest of a prompt.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub requests: AtomicU64,
    pub retries: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    stats: Arc<GatewayStats>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            stats: Arc::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        params.validate()?;
        let start = Instant::now();
        let mut retries = 0u32;
        loop {
            self.stats.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(prompt, params) {
                Ok(reply) => {
                    return Ok(Completion {
                        text: reply.text,
                        usage: reply.usage,
                        backend_id: self.backend.id().to_string(),
                        latency_ms: start.elapsed().as_millis() as u64,
                        retries,
                    })
                }
                Err(err) if err.is_retryable() && retries + 1 < self.retry.max_attempts => {
                    std::thread::sleep(self.retry.delay_for(retries));
                    retries += 1;
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                }
                Err(err) => {
                    self.stats.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(err);
                }
            }
        }
    }

    /// Generates every prompt with at most `parallelism` requests in flight.
    /// Output order follows input order; failures stay per item.
    pub fn batch_generate<S: AsRef<str> + Sync>(
        &self,
        prompts: &[S],
        params: &GenerationParams,
        parallelism: usize,
    ) -> Vec<Result<Completion, GatewayError>> {
        let workers = parallelism.max(1).min(prompts.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Completion, GatewayError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let result = self.generate(prompts[i].as_ref(), params);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every slot is filled"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScriptLine {
    pub fingerprint: String,
    #[serde(default)]
    pub response: Option<String>,
    /// When set, the mock fails this prompt with a backend error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Scripted {
    Reply(String),
    Fail(String),
}

/// Deterministic backend: looks prompts up by fingerprint.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: HashMap<String, Scripted>,
    default: String,
}

impl MockBackend {
    pub fn new(script: HashMap<String, String>, default: impl Into<String>) -> Self {
        Self {
            script: script.into_iter().map(|(k, v)| (k, Scripted::Reply(v))).collect(),
            default: default.into(),
        }
    }

    pub fn from_lines(lines: Vec<MockScriptLine>, default: impl Into<String>) -> Self {
        let script = lines
            .into_iter()
            .map(|l| {
                let entry = match l.error {
                    Some(e) => Scripted::Fail(e),
                    None => Scripted::Reply(l.response.unwrap_or_default()),
                };
                (l.fingerprint, entry)
            })
            .collect();
        Self {
            script,
            default: default.into(),
        }
    }

    pub fn from_jsonl_path(path: impl AsRef<Path>, default: impl Into<String>) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: MockScriptLine = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
            lines.push(parsed);
        }
        Ok(Self::from_lines(lines, default))
    }

    /// Scripts the response for an exact prompt text.
    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.script
            .insert(fingerprint(prompt), Scripted::Reply(response.into()));
    }

    /// Makes an exact prompt text fail.
    pub fn insert_failure(&mut self, prompt: &str, message: impl Into<String>) {
        self.script.insert(fingerprint(prompt), Scripted::Fail(message.into()));
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<BackendReply, GatewayError> {
        match self.script.get(&fingerprint(prompt)) {
            Some(Scripted::Reply(text)) => Ok(BackendReply {
                text: text.clone(),
                usage: None,
            }),
            Some(Scripted::Fail(message)) => Err(GatewayError::Backend {
                status: None,
                message: message.clone(),
            }),
            None => Ok(BackendReply {
                text: self.default.clone(),
                usage: None,
            }),
        }
    }
}

#[cfg(feature = "http")]
pub use http::HttpBackend;

#[cfg(feature = "http")]
mod http {
    use super::*;
    use serde_json::{json, Value};

    /// OpenAI-style `chat/completions` client.
    #[derive(Debug, Clone)]
    pub struct HttpBackend {
        endpoint: String,
        model: String,
        api_key: String,
        system_message: Option<String>,
        id: String,
        agent: ureq::Agent,
    }

    impl HttpBackend {
        /// Reads the credential from `CRAG_API_KEY`; fails without network
        /// access when it is missing.
        pub fn from_env(endpoint: &str, model: &str) -> Result<Self, GatewayError> {
            let key = std::env::var(API_KEY_ENV).unwrap_or_default();
            Self::new(endpoint, model, &key)
        }

        pub fn new(endpoint: &str, model: &str, api_key: &str) -> Result<Self, GatewayError> {
            if api_key.trim().is_empty() {
                return Err(GatewayError::Auth {
                    message: format!("no credential; set {API_KEY_ENV}"),
                });
            }
            Ok(Self {
                endpoint: endpoint.to_string(),
                model: model.to_string(),
                api_key: api_key.to_string(),
                system_message: None,
                id: format!("http:{model}"),
                agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build(),
            })
        }

        /// Sends `message` as a separate system turn ahead of the prompt.
        pub fn with_system_message(mut self, message: impl Into<String>) -> Self {
            self.system_message = Some(message.into());
            self
        }

        pub fn request_body(&self, prompt: &str, params: &GenerationParams) -> Value {
            let mut messages = Vec::new();
            if let Some(system) = &self.system_message {
                messages.push(json!({"role": "system", "content": system}));
            }
            messages.push(json!({"role": "user", "content": prompt}));
            let mut body = json!({
                "model": self.model,
                "messages": messages,
                "temperature": params.effective_temperature(),
                "max_tokens": params.max_new_tokens,
            });
            if let Some(seed) = params.seed {
                body["seed"] = json!(seed);
            }
            body
        }
    }

    fn classify(status: u16, body: String) -> GatewayError {
        match status {
            401 | 403 => GatewayError::Auth { message: body },
            429 => GatewayError::RateLimited,
            500..=599 => GatewayError::Server { status },
            _ => GatewayError::Backend {
                status: Some(status),
                message: body,
            },
        }
    }

    pub(super) fn parse_reply(body: &Value) -> Result<BackendReply, GatewayError> {
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::InvalidResponse {
                message: "missing choices[0].message.content".into(),
            })?;
        let usage = body.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                output_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(BackendReply {
            text: text.to_string(),
            usage,
        })
    }

    impl Backend for HttpBackend {
        fn id(&self) -> &str {
            &self.id
        }

        fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<BackendReply, GatewayError> {
            let response = self
                .agent
                .post(&self.endpoint)
                .set("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(self.request_body(prompt, params));
            match response {
                Ok(resp) => {
                    let body: Value = resp
                        .into_json()
                        .map_err(|e| GatewayError::InvalidResponse { message: e.to_string() })?;
                    parse_reply(&body)
                }
                Err(ureq::Error::Status(status, resp)) => Err(classify(status, resp.into_string().unwrap_or_default())),
                Err(ureq::Error::Transport(t)) => Err(GatewayError::Transport { message: t.to_string() }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        failures: Mutex<Vec<GatewayError>>,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &str, _: &GenerationParams) -> Result<BackendReply, GatewayError> {
            match self.failures.lock().unwrap().pop() {
                Some(e) => Err(e),
                None => Ok(BackendReply {
                    text: "ok".into(),
                    usage: None,
                }),
            }
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
        }
    }

    #[test]
    fn greedy_overrides_temperature() {
        let p = GenerationParams::default();
        assert_eq!(p.temperature, 0.4);
        assert_eq!(p.max_new_tokens, 2048);
        assert_eq!(p.effective_temperature(), 0.0);
        let sampled = GenerationParams {
            decoding: Decoding::Sampled,
            ..p
        };
        assert_eq!(sampled.effective_temperature(), 0.4);
    }

    #[test]
    fn mock_lookup_and_default() {
        let mut mock = MockBackend::new(HashMap::new(), "fallback");
        mock.insert("H", "X");
        let gw = Gateway::new(Arc::new(mock));
        let p = GenerationParams::default();
        assert_eq!(gw.generate("H", &p).unwrap().text, "X");
        assert_eq!(gw.generate("other", &p).unwrap().text, "fallback");
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(
            fingerprint("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn retries_transient_failures() {
        let backend = Flaky {
            failures: Mutex::new(vec![GatewayError::RateLimited, GatewayError::Server { status: 503 }]),
        };
        let gw = Gateway::new(Arc::new(backend)).with_retry(fast());
        let c = gw.generate("p", &GenerationParams::default()).unwrap();
        assert_eq!(c.retries, 2);
        assert_eq!(gw.stats().requests.load(Ordering::Relaxed), 3);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let backend = Flaky {
            failures: Mutex::new(vec![GatewayError::RateLimited; 3]),
        };
        let gw = Gateway::new(Arc::new(backend)).with_retry(fast());
        assert_eq!(
            gw.generate("p", &GenerationParams::default()),
            Err(GatewayError::RateLimited)
        );
    }

    #[test]
    fn never_retries_validation_errors() {
        let err = GatewayError::Backend {
            status: Some(400),
            message: "bad".into(),
        };
        let backend = Flaky {
            failures: Mutex::new(vec![err.clone()]),
        };
        let gw = Gateway::new(Arc::new(backend)).with_retry(fast());
        assert_eq!(gw.generate("p", &GenerationParams::default()), Err(err));
        assert_eq!(gw.stats().requests.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn rejects_negative_temperature() {
        let gw = Gateway::new(Arc::new(MockBackend::new(HashMap::new(), "")));
        let p = GenerationParams {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(matches!(gw.generate("x", &p), Err(GatewayError::InvalidParams { .. })));
    }

    #[test]
    fn batch_keeps_order_and_isolates_failures() {
        let mut mock = MockBackend::new(HashMap::new(), "default");
        let prompts: Vec<String> = (0..10).map(|i| format!("prompt {i}")).collect();
        for (i, p) in prompts.iter().enumerate() {
            mock.insert(p, format!("answer {i}"));
        }
        mock.insert_failure(&prompts[4], "scripted failure");
        let gw = Gateway::new(Arc::new(mock));
        let out = gw.batch_generate(&prompts, &GenerationParams::default(), 3);
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            if i == 4 {
                assert!(matches!(r, Err(GatewayError::Backend { .. })));
            } else {
                assert_eq!(r.as_ref().unwrap().text, format!("answer {i}"));
            }
        }
        let texts = |p: usize| {
            gw.batch_generate(&prompts, &GenerationParams::default(), p)
                .into_iter()
                .map(|r| r.map(|c| c.text))
                .collect::<Vec<_>>()
        };
        assert_eq!(texts(1), texts(8));
    }

    #[test]
    fn mock_script_lines_can_fail() {
        let mock = MockBackend::from_lines(
            vec![
                MockScriptLine {
                    fingerprint: fingerprint("a"),
                    response: Some("A".into()),
                    error: None,
                },
                MockScriptLine {
                    fingerprint: fingerprint("b"),
                    response: None,
                    error: Some("boom".into()),
                },
            ],
            "d",
        );
        let p = GenerationParams::default();
        assert_eq!(mock.complete("a", &p).unwrap().text, "A");
        assert!(mock.complete("b", &p).is_err());
    }

    #[cfg(feature = "http")]
    #[test]
    fn http_requires_credential_locally() {
        assert!(matches!(
            HttpBackend::new("http://127.0.0.1:9/v1/chat/completions", "m", ""),
            Err(GatewayError::Auth { .. })
        ));
    }

    #[cfg(feature = "http")]
    #[test]
    fn http_request_body_uses_effective_temperature() {
        let backend = HttpBackend::new("http://localhost/x", "gpt-test", "k").unwrap();
        let body = backend.request_body(
            "hello",
            &GenerationParams {
                seed: Some(7),
                ..Default::default()
            },
        );
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 2048);
        assert_eq!(body["seed"], 7);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["messages"][0]["role"], "user");
        let with_system = backend
            .with_system_message("sys")
            .request_body("hello", &GenerationParams::default());
        assert_eq!(with_system["messages"][0]["role"], "system");
    }

    #[cfg(feature = "http")]
    #[test]
    fn parses_chat_completion_reply() {
        let body = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "#Answer: 2002"}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 3}
        });
        let reply = http::parse_reply(&body).unwrap();
        assert_eq!(reply.text, "#Answer: 2002");
        assert_eq!(
            reply.usage,
            Some(Usage {
                prompt_tokens: 10,
                output_tokens: 3
            })
        );
        assert!(http::parse_reply(&serde_json::json!({})).is_err());
    }
}
