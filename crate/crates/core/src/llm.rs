//! Chat-completion client: live HTTP backend with retry and rate limiting,
//! plus record/replay through cassette files for offline runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("llm backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no recorded reply for request {0}")]
    ReplayMiss(String),
    #[error("cassette {path}, line {line}: {message}")]
    Cassette {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cassette io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    /// Content hash over the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let canonical = canonical_json(&value);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn canonical_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            let fields: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{}", Value::String(k.clone()), canonical_json(v)))
                .collect();
            format!("{{{}}}", fields.join(","))
        }
        Value::Array(items) => {
            format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(","))
        }
        other => other.to_string(),
    }
}

/// Per-request knobs shared by every call of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestSettings {
    pub model_id: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".into(),
            max_output_tokens: 1024,
            temperature: 0.0,
        }
    }
}

impl RequestSettings {
    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            messages,
            model_id: self.model_id.clone(),
            max_output_tokens: self.max_output_tokens,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatReply {
    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError>;
}

/// Backend driven by a closure. Handy for tests and for scripted models.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatReply, LlmError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError> {
        (self.0)(req)
    }
}

/// Token bucket shared by all clones of a backend.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let capacity = f64::from(requests.max(1));
        Self {
            capacity,
            per_second: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter lock");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_second;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.per_second)
            };
            thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            retries: 3,
            backoff_base_ms: 500,
            requests_per_minute: 60,
            timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Live backend speaking the common chat-completions wire format.
#[derive(Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Arc<RateLimiter>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        let limiter = Arc::new(RateLimiter::per_minute(config.requests_per_minute));
        Ok(Self {
            config,
            api_key,
            client,
            limiter,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

fn parse_finish(reason: Option<&str>) -> FinishReason {
    match reason {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError> {
        let body = WireRequest {
            model: &req.model_id,
            messages: &req.messages,
            max_tokens: req.max_output_tokens,
            temperature: req.temperature,
        };
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(self.backoff(attempt - 1));
            }
            self.limiter.acquire();
            let mut call = self.client.post(self.endpoint()).json(&body);
            if let Some(key) = &self.api_key {
                call = call.bearer_auth(key);
            }
            let resp = match call.send() {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    warn!("llm request failed (attempt {}): {e}", attempt + 1);
                    continue;
                }
            };
            let status = resp.status();
            if status.as_u16() == 429 || status.is_server_error() {
                last_error = format!("http status {status}");
                warn!("llm backend returned {status} (attempt {})", attempt + 1);
                continue;
            }
            if !status.is_success() {
                let text = resp.text().unwrap_or_default();
                return Err(LlmError::BackendUnavailable(format!("http status {status}: {text}")));
            }
            let wire: WireResponse = resp
                .json()
                .map_err(|e| LlmError::BackendUnavailable(format!("bad response body: {e}")))?;
            let choice = wire
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| LlmError::BackendUnavailable("response has no choices".into()))?;
            return Ok(ChatReply {
                content: choice.message.content.unwrap_or_default(),
                finish_reason: parse_finish(choice.finish_reason.as_deref()),
                usage: wire.usage.unwrap_or_default(),
            });
        }
        Err(LlmError::BackendUnavailable(format!(
            "gave up after {} attempts: {last_error}",
            self.config.retries + 1
        )))
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub request: ChatRequest,
    pub reply: ChatReply,
}

/// Writes a session as JSON Lines, one exchange per line.
pub fn record_cassette(session: &[(ChatRequest, ChatReply)], path: &Path) -> Result<(), LlmError> {
    let io = |source| LlmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for (req, reply) in session {
        let entry = CassetteEntry {
            request_hash: req.hash(),
            request: req.clone(),
            reply: reply.clone(),
        };
        let line = serde_json::to_string(&entry).expect("cassette entry serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

pub fn load_cassette(path: &Path) -> Result<Vec<(ChatRequest, ChatReply)>, LlmError> {
    let io = |source| LlmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut session = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| LlmError::Cassette {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.request.hash() != entry.request_hash {
            return Err(LlmError::Cassette {
                path: path.to_path_buf(),
                line: i + 1,
                message: "request_hash does not match request".into(),
            });
        }
        session.push((entry.request, entry.reply));
    }
    Ok(session)
}

/// Answers from a cassette; unknown requests are a [`LlmError::ReplayMiss`].
pub struct ReplayBackend {
    replies: BTreeMap<String, ChatReply>,
}

impl ReplayBackend {
    pub fn from_session(session: Vec<(ChatRequest, ChatReply)>) -> Self {
        let replies = session.into_iter().map(|(req, reply)| (req.hash(), reply)).collect();
        Self { replies }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::from_session(load_cassette(path)?))
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError> {
        let hash = req.hash();
        self.replies
            .get(&hash)
            .cloned()
            .ok_or(LlmError::ReplayMiss(hash))
    }
}

/// Passes requests through and remembers every exchange.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<BTreeMap<String, (ChatRequest, ChatReply)>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    /// Exchanges so far, ordered by request hash so the cassette does not
    /// depend on scheduling.
    pub fn session(&self) -> Vec<(ChatRequest, ChatReply)> {
        self.log.lock().expect("recording lock").values().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        record_cassette(&self.session(), path)
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError> {
        let reply = self.inner.complete(req)?;
        self.log
            .lock()
            .expect("recording lock")
            .insert(req.hash(), (req.clone(), reply.clone()));
        Ok(reply)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError> {
        (**self).complete(req)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, LlmError> {
        (**self).complete(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(model: &str) -> ChatRequest {
        ChatRequest {
            messages: vec![
                ChatMessage::new(Role::System, "You are a proficient and helpful assistant in java testing with JUnit framework"),
                ChatMessage::new(Role::User, "hello"),
            ],
            model_id: model.into(),
            max_output_tokens: 256,
            temperature: 0.0,
        }
    }

    #[test]
    fn hash_is_stable() {
        let h = request("gpt-3.5-turbo").hash();
        assert_eq!(h, request("gpt-3.5-turbo").hash());
        assert_ne!(h, request("gpt-4").hash());
        assert_eq!(h.len(), 64);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[{"d":2,"c":3}]}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":[{"c":3,"d":2}],"b":1}"#);
    }

    #[test]
    fn replay_round_trip_and_miss() {
        let session = vec![(request("gpt-3.5-turbo"), ChatReply::stop("int a = 1;\nEND_OF_DEMO"))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        record_cassette(&session, &path).unwrap();
        assert_eq!(load_cassette(&path).unwrap(), session);
        let replay = ReplayBackend::load(&path).unwrap();
        assert_eq!(replay.complete(&request("gpt-3.5-turbo")).unwrap(), session[0].1);
        assert!(matches!(replay.complete(&request("unknown-model")), Err(LlmError::ReplayMiss(_))));
    }

    #[test]
    fn empty_session_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        record_cassette(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(load_cassette(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupted_line_is_reported() {
        let session = vec![
            (request("a"), ChatReply::stop("x();")),
            (request("b"), ChatReply::stop("y();")),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        record_cassette(&session, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        match load_cassette(&path) {
            Err(LlmError::Cassette { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected cassette error, got {other:?}"),
        }
    }

    #[test]
    fn recorder_orders_by_hash() {
        let rec = RecordingBackend::new(FnBackend(|r: &ChatRequest| Ok(ChatReply::stop(r.model_id.clone()))));
        rec.complete(&request("z")).unwrap();
        rec.complete(&request("a")).unwrap();
        rec.complete(&request("z")).unwrap();
        let session = rec.session();
        assert_eq!(session.len(), 2);
        assert!(session[0].0.hash() < session[1].0.hash());
    }
}
