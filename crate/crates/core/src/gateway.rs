//! Every model call goes through a [`Gateway`].
//!
//! The wire shape is the usual chat-completions body: `model`, `messages`
//! with role/content, `temperature`, `max_tokens`, and images sent as
//! base64 `data:` URIs inside `image_url` parts. A gateway bounds the
//! number of requests it has in flight and retries transport failures with
//! exponential backoff. Well-formed responses are never retried.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_MAX_TOKENS: u32 = 1024;
/// Sampling temperature for self-generated GCoT candidates.
pub const GENERATION_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_API_KEY_ENV: &str = "GCOT_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response body: {0}")]
    Protocol(String),
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("backend error: {0}")]
    Backend(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image { media_type: String, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Sampling seed, sent only when set.
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user turn: optional image first, then the prompt text.
    pub fn user(model: impl Into<String>, text: impl Into<String>, image: Option<(String, Vec<u8>)>) -> Self {
        let mut parts = Vec::with_capacity(2);
        if let Some((media_type, data)) = image {
            parts.push(Part::Image { media_type, data });
        }
        parts.push(Part::Text(text.into()));
        Self {
            model: model.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                parts,
            }],
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t.max(0.0);
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// All text parts of all messages, joined by newlines.
    pub fn prompt_text(&self) -> String {
        let mut out = Vec::new();
        for m in &self.messages {
            for p in &m.parts {
                if let Part::Text(t) = p {
                    out.push(t.as_str());
                }
            }
        }
        out.join("\n")
    }

    pub fn image(&self) -> Option<&[u8]> {
        self.messages.iter().flat_map(|m| &m.parts).find_map(|p| match p {
            Part::Image { data, .. } => Some(data.as_slice()),
            _ => None,
        })
    }

    pub fn to_wire_value(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content = match m.parts.as_slice() {
                    [Part::Text(t)] => Value::String(t.clone()),
                    parts => Value::Array(parts.iter().map(part_to_wire).collect()),
                };
                json!({ "role": m.role, "content": content })
            })
            .collect();
        let mut body = serde_json::Map::new();
        body.insert("model".into(), Value::String(self.model.clone()));
        body.insert("messages".into(), Value::Array(messages));
        body.insert("temperature".into(), json!(self.temperature));
        body.insert("max_tokens".into(), json!(self.max_tokens));
        if let Some(seed) = self.seed {
            body.insert("seed".into(), json!(seed));
        }
        Value::Object(body)
    }

    /// The exact request body sent over HTTP.
    pub fn to_wire(&self) -> String {
        self.to_wire_value().to_string()
    }

    pub fn from_wire(body: &[u8]) -> Result<Self, GatewayError> {
        let v: Value = serde_json::from_slice(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        let bad = |what: &str| GatewayError::Protocol(format!("request: {what}"));
        let model = v["model"].as_str().ok_or_else(|| bad("missing model"))?.to_string();
        let temperature = v.get("temperature").and_then(Value::as_f64).unwrap_or(0.0);
        let max_tokens = v
            .get("max_tokens")
            .and_then(Value::as_u64)
            .map(|n| n as u32)
            .unwrap_or(DEFAULT_MAX_TOKENS);
        let seed = v.get("seed").and_then(Value::as_u64);
        let mut messages = Vec::new();
        for m in v["messages"].as_array().ok_or_else(|| bad("missing messages"))? {
            let role: Role = serde_json::from_value(m["role"].clone()).map_err(|_| bad("bad role"))?;
            let parts = match &m["content"] {
                Value::String(s) => vec![Part::Text(s.clone())],
                Value::Array(items) => items.iter().map(part_from_wire).collect::<Result<_, _>>()?,
                _ => return Err(bad("bad content")),
            };
            messages.push(ChatMessage { role, parts });
        }
        Ok(Self {
            model,
            messages,
            temperature,
            max_tokens,
            seed,
        })
    }
}

fn part_to_wire(p: &Part) -> Value {
    match p {
        Part::Text(t) => json!({ "type": "text", "text": t }),
        Part::Image { media_type, data } => {
            let b64 = base64::engine::general_purpose::STANDARD.encode(data);
            json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{media_type};base64,{b64}") }
            })
        }
    }
}

fn part_from_wire(v: &Value) -> Result<Part, GatewayError> {
    let bad = |what: &str| GatewayError::Protocol(format!("content part: {what}"));
    match v["type"].as_str() {
        Some("text") => Ok(Part::Text(v["text"].as_str().ok_or_else(|| bad("text"))?.to_string())),
        Some("image_url") => {
            let url = v["image_url"]["url"].as_str().ok_or_else(|| bad("url"))?;
            let rest = url.strip_prefix("data:").ok_or_else(|| bad("not a data uri"))?;
            let (media_type, b64) = rest.split_once(";base64,").ok_or_else(|| bad("not base64"))?;
            let data = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|_| bad("invalid base64"))?;
            Ok(Part::Image {
                media_type: media_type.to_string(),
                data,
            })
        }
        _ => Err(bad("unknown type")),
    }
}

/// Extracts the first choice's message content from a response body.
pub fn parse_chat_response(body: &[u8]) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    let content = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| GatewayError::Protocol("no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let texts: Option<Vec<&str>> = parts.iter().map(|p| p.get("text").and_then(Value::as_str)).collect();
            texts
                .map(|t| t.concat())
                .ok_or_else(|| GatewayError::Protocol("content parts without text".into()))
        }
        _ => Err(GatewayError::Protocol("content is not text".into())),
    }
}

/// Renders a minimal chat-completions response body for `content`.
pub fn render_chat_response(model: &str, content: &str) -> String {
    json!({
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop"
        }]
    })
    .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub endpoint_url: String,
    #[serde(default = "default_auth_env")]
    pub auth_env_var: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// First backoff delay; doubles on each retry.
    #[serde(default = "default_backoff")]
    pub backoff_base_s: f64,
}

fn default_auth_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    8
}
fn default_backoff() -> f64 {
    1.0
}

impl BackendProfile {
    pub fn new(name: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            endpoint_url: endpoint_url.into(),
            auth_env_var: default_auth_env(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            backoff_base_s: default_backoff(),
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_s.max(0.0) * 2f64.powi(retry as i32))
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint_url.trim_end_matches('/'))
    }
}

/// Something that can answer one chat request once.
pub trait Transport: Send + Sync {
    fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<String, GatewayError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(profile: &BackendProfile) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(profile.timeout_s.max(0.001)))
            .build()
            .map_err(|e| GatewayError::Backend(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut req = self
            .client
            .post(profile.completions_url())
            .header("content-type", "application/json")
            .body(request.to_wire());
        if let Ok(key) = std::env::var(&profile.auth_env_var) {
            req = req.bearer_auth(key);
        }
        let transport = |e: reqwest::Error| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        };
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let body = resp.bytes().map_err(transport)?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::Transport {
                attempts: 1,
                message: format!("status {status}"),
            });
        }
        if !status.is_success() {
            return Err(GatewayError::Rejected {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        parse_chat_response(&body)
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }

    fn current(&self) -> usize {
        *self.in_flight.lock().unwrap()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Counters exposed for observability and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GatewayStats {
    pub attempts: usize,
    pub completed: usize,
    pub failed: usize,
    pub peak_in_flight: usize,
}

struct Inner {
    profile: BackendProfile,
    transport: Arc<dyn Transport>,
    limiter: Limiter,
    attempts: AtomicUsize,
    completed: AtomicUsize,
    failed: AtomicUsize,
    peak: AtomicUsize,
}

/// Shareable handle; clones talk to the same backend and share its bound.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("profile", &self.inner.profile).finish()
    }
}

impl Gateway {
    pub fn new(profile: BackendProfile, transport: Arc<dyn Transport>) -> Self {
        let limit = profile.max_in_flight.max(1);
        Self {
            inner: Arc::new(Inner {
                profile,
                transport,
                limiter: Limiter {
                    in_flight: Mutex::new(0),
                    freed: Condvar::new(),
                    limit,
                },
                attempts: AtomicUsize::new(0),
                completed: AtomicUsize::new(0),
                failed: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }),
        }
    }

    pub fn http(profile: BackendProfile) -> Result<Self, GatewayError> {
        let transport = HttpTransport::new(&profile)?;
        Ok(Self::new(profile, Arc::new(transport)))
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.inner.profile
    }

    pub fn in_flight(&self) -> usize {
        self.inner.limiter.current()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            attempts: self.inner.attempts.load(Ordering::Relaxed),
            completed: self.inner.completed.load(Ordering::Relaxed),
            failed: self.inner.failed.load(Ordering::Relaxed),
            peak_in_flight: self.inner.peak.load(Ordering::Relaxed),
        }
    }

    /// Sends `request`, retrying transport failures up to `max_retries` times.
    pub fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let inner = &*self.inner;
        let mut retry = 0;
        loop {
            let result = {
                let _permit = inner.limiter.acquire();
                inner.peak.fetch_max(inner.limiter.current(), Ordering::Relaxed);
                inner.attempts.fetch_add(1, Ordering::Relaxed);
                inner.transport.send(&inner.profile, request)
            };
            match result {
                Ok(text) => {
                    inner.completed.fetch_add(1, Ordering::Relaxed);
                    return Ok(text);
                }
                Err(e) if e.is_transient() && retry < inner.profile.max_retries => {
                    log::debug!("{}: retry {} after {e}", inner.profile.name, retry + 1);
                    std::thread::sleep(inner.profile.backoff(retry));
                    retry += 1;
                }
                Err(e) => {
                    inner.failed.fetch_add(1, Ordering::Relaxed);
                    return Err(match e {
                        GatewayError::Transport { message, .. } => GatewayError::Transport {
                            attempts: retry + 1,
                            message,
                        },
                        other => other,
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        fail_first: u32,
        calls: AtomicU32,
    }

    impl Transport for Flaky {
        fn send(&self, _: &BackendProfile, _: &ChatRequest) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(GatewayError::Transport {
                    attempts: 1,
                    message: "reset".into(),
                })
            } else {
                Ok("ok".into())
            }
        }
    }

    fn fast_profile(retries: u32) -> BackendProfile {
        BackendProfile {
            max_retries: retries,
            backoff_base_s: 0.001,
            ..BackendProfile::new("t", "http://127.0.0.1:9")
        }
    }

    #[test]
    fn retries_transient_failures() {
        let t = Arc::new(Flaky {
            fail_first: 2,
            calls: AtomicU32::new(0),
        });
        let g = Gateway::new(fast_profile(2), t.clone());
        assert_eq!(g.complete(&ChatRequest::user("m", "hi", None)).unwrap(), "ok");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let t = Arc::new(Flaky {
            fail_first: 10,
            calls: AtomicU32::new(0),
        });
        let g = Gateway::new(fast_profile(1), t);
        let err = g.complete(&ChatRequest::user("m", "hi", None)).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 2, .. }));
        assert_eq!(g.stats().failed, 1);
    }

    #[test]
    fn protocol_errors_are_not_retried() {
        struct Garbled(AtomicU32);
        impl Transport for Garbled {
            fn send(&self, _: &BackendProfile, _: &ChatRequest) -> Result<String, GatewayError> {
                self.0.fetch_add(1, Ordering::SeqCst);
                parse_chat_response(b"{\"choices\": []}")
            }
        }
        let t = Arc::new(Garbled(AtomicU32::new(0)));
        let g = Gateway::new(fast_profile(5), t.clone());
        assert!(matches!(
            g.complete(&ChatRequest::user("m", "hi", None)),
            Err(GatewayError::Protocol(_))
        ));
        assert_eq!(t.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles() {
        let p = BackendProfile::new("p", "http://x");
        assert_eq!(p.backoff(0), Duration::from_secs(1));
        assert_eq!(p.backoff(1), Duration::from_secs(2));
        assert_eq!(p.backoff(3), Duration::from_secs(8));
    }

    #[test]
    fn text_only_message_uses_string_content() {
        let r = ChatRequest::user("m", "hello", None);
        assert_eq!(
            r.to_wire(),
            r#"{"model":"m","messages":[{"role":"user","content":"hello"}],"temperature":0.0,"max_tokens":1024}"#
        );
    }

    #[test]
    fn wire_round_trip_with_image() {
        let r = ChatRequest::user("m", "look", Some(("image/png".into(), vec![1, 2, 3])))
            .with_temperature(0.8)
            .with_seed(4);
        let body = r.to_wire();
        assert!(body.contains(r#""url":"data:image/png;base64,AQID""#));
        assert_eq!(ChatRequest::from_wire(body.as_bytes()).unwrap(), r);
    }

    #[test]
    fn response_parsing() {
        let body = render_chat_response("m", "[0.611, 0.381, 0.875, 0.455]");
        assert_eq!(
            parse_chat_response(body.as_bytes()).unwrap(),
            "[0.611, 0.381, 0.875, 0.455]"
        );
        assert!(parse_chat_response(b"not json").is_err());
        assert!(parse_chat_response(br#"{"choices":[{"message":{"content":null}}]}"#).is_err());
        let parts = br#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#;
        assert_eq!(parse_chat_response(parts).unwrap(), "ab");
    }
}
