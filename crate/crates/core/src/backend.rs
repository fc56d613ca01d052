//! Pluggable multimodal chat-completion backends.
//!
//! [`ChatBackend`] is the single seam between the pipeline and a model. Two
//! implementations ship here:
//!
//! * [`MockBackend`]: deterministic and scriptable. Replies are a pure
//!   function of the request content and a seed, unless a [`MockRule`]
//!   matches first.
//! * [`RemoteBackend`]: speaks the OpenAI-compatible
//!   `POST {endpoint}/chat/completions` protocol with images embedded as
//!   base64 data URLs.
//!
//! [`complete_batch`] fans requests out over a bounded worker pool and
//! returns results in input order.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::conversation::ImageRef;
use crate::digest::{sha256_hex, FieldHasher};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("backend cannot supply {0}")]
    UnsupportedCapability(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Image bytes resolved from an [`ImageRef`] at request-construction time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub source: String,
    pub media_type: String,
    pub digest: String,
    pub bytes: Arc<[u8]>,
}

impl ImageData {
    pub fn from_bytes(source: impl Into<String>, media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            source: source.into(),
            media_type: media_type.into(),
            digest: sha256_hex(&bytes),
            bytes: bytes.into(),
        }
    }

    /// Loads `image` relative to `root`. Fails if the file is absent or the
    /// reference is marked missing.
    pub fn load(root: &Path, image: &ImageRef) -> std::io::Result<Self> {
        if image.missing {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} is marked missing", image.uri),
            ));
        }
        let bytes = std::fs::read(root.join(&image.uri))?;
        Ok(Self::from_bytes(image.uri.clone(), image.media_type.clone(), bytes))
    }

    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Image(ImageData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<ContentPart>) -> Self {
        Self { role, parts }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, vec![ContentPart::Text(text.into())])
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, vec![ContentPart::Text(text.into())])
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, vec![ContentPart::Text(text.into())])
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Text(t) => Some(t.as_str()),
            ContentPart::Image(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
    /// Free-form label used for mock scripting, caching and audit, e.g. `persona/u42`.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            max_output_tokens: 512,
            temperature: 0.0,
            want_logprobs: false,
            tag: tag.into(),
        }
    }

    pub fn max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.messages.iter().any(|m| m.parts.is_empty()) {
            return Err(BackendError::InvalidRequest("message without parts".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// All text parts joined by newlines, in message order.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| m.texts())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageData> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                ContentPart::Image(img) => Some(img),
                ContentPart::Text(_) => None,
            })
        })
    }

    /// Digest over everything that can influence a reply. Image parts
    /// contribute their byte digest.
    pub fn content_hash(&self) -> String {
        let mut h = FieldHasher::new("chat-request/v1");
        h.str(&self.tag)
            .str(&self.max_output_tokens.to_string())
            .str(&self.temperature.to_bits().to_string())
            .str(if self.want_logprobs { "lp" } else { "" });
        for m in &self.messages {
            h.str(match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            });
            for p in &m.parts {
                match p {
                    ContentPart::Text(t) => h.str("text").str(t),
                    ContentPart::Image(img) => h.str("image").str(&img.digest),
                };
            }
        }
        h.finish_hex()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub backend_id: String,
    pub latency: Duration,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Preferred number of concurrent requests.
    fn max_parallel(&self) -> usize {
        1
    }
}

/// Runs `requests` with at most `max_parallel` in flight. Results are
/// positionally aligned with the input; failures are reported per item.
pub fn complete_batch(
    backend: &dyn ChatBackend,
    requests: &[ChatRequest],
    max_parallel: usize,
) -> Vec<Result<ChatResponse, BackendError>> {
    let workers = max_parallel.max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| backend.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ChatResponse, BackendError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let result = backend.complete(&requests[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Mock backend

type ReplyFn = Arc<dyn Fn(&ChatRequest) -> String + Send + Sync>;

#[derive(Clone)]
pub enum MockReply {
    Text(String),
    /// Reply with every text part of the request, one per line, and
    /// `[image <digest>]` for each image part.
    Echo,
    Fail(String),
    With(ReplyFn),
}

impl std::fmt::Debug for MockReply {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MockReply::Text(t) => f.debug_tuple("Text").field(t).finish(),
            MockReply::Echo => f.write_str("Echo"),
            MockReply::Fail(m) => f.debug_tuple("Fail").field(m).finish(),
            MockReply::With(_) => f.write_str("With(..)"),
        }
    }
}

/// A scripted reply. All set conditions must match; the first matching rule wins.
#[derive(Debug, Clone)]
pub struct MockRule {
    tag: Option<Regex>,
    contains: Option<String>,
    image_digest: Option<String>,
    reply: MockReply,
}

impl MockRule {
    pub fn any(reply: MockReply) -> Self {
        Self {
            tag: None,
            contains: None,
            image_digest: None,
            reply,
        }
    }

    /// Matches requests whose tag matches `pattern` (a regex).
    pub fn tag(pattern: &str, reply: MockReply) -> Self {
        Self {
            tag: Some(Regex::new(pattern).expect("valid tag pattern")),
            ..Self::any(reply)
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn with_image(mut self, digest: impl Into<String>) -> Self {
        self.image_digest = Some(digest.into());
        self
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        self.tag.as_ref().is_none_or(|re| re.is_match(&req.tag))
            && self.contains.as_ref().is_none_or(|n| req.text().contains(n.as_str()))
            && self
                .image_digest
                .as_ref()
                .is_none_or(|d| req.images().any(|img| &img.digest == d))
    }
}

/// Deterministic backend for tests and offline runs.
///
/// Unscripted requests get a hash-derived reply shaped by the tag prefix, so
/// the full pipeline runs end to end: `persona/` yields an OCEAN line,
/// `stance/` and `preannotate/` yield a label word, `caption/describe/` and
/// `caption/intent/` yield captions.
pub struct MockBackend {
    id: String,
    seed: u64,
    rules: Vec<MockRule>,
    max_parallel: usize,
    calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            id: format!("mock:{seed}"),
            seed,
            rules: Vec::new(),
            max_parallel: 4,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Requests received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn reset_log(&self) {
        self.log.lock().unwrap().clear();
        self.calls.store(0, Ordering::SeqCst);
    }

    fn key(&self, req: &ChatRequest) -> FieldHasher {
        let mut h = FieldHasher::new("mock-reply");
        h.str(&self.seed.to_string()).str(&req.content_hash());
        h
    }

    fn default_reply(&self, req: &ChatRequest) -> String {
        let h = self.key(req).finish_u64();
        let pick = |shift: u32, n: u64| ((h >> shift) % n) as usize;
        let tag = req.tag.as_str();
        if tag.starts_with("persona/") {
            let r: Vec<usize> = (0..5).map(|i| 1 + pick(i * 7, 5)).collect();
            format!("O:{} C:{} E:{} A:{} N:{}", r[0], r[1], r[2], r[3], r[4])
        } else if tag.starts_with("stance/") || tag.starts_with("preannotate/") {
            ["Favor", "Against", "None"][pick(0, 3)].to_string()
        } else if tag.starts_with("caption/describe") {
            const SCENES: [&str; 4] = [
                "a crowd holding signs outdoors",
                "a screenshot of a price chart",
                "a close-up photo of a car dashboard",
                "a meme with bold white caption text",
            ];
            format!("The image shows {} (ref {:08x}).", SCENES[pick(0, 4)], h as u32)
        } else if tag.starts_with("caption/intent") {
            const INTENTS: [&str; 4] = [
                "mock the opposing side",
                "support the original poster",
                "add factual evidence",
                "express sarcasm",
            ];
            format!(
                "The commenter uses the image to {} (ref {:08x}).",
                INTENTS[pick(0, 4)],
                h as u32
            )
        } else {
            format!("mock response {h:016x}")
        }
    }

    fn logprobs_for(&self, req: &ChatRequest, text: &str) -> Vec<TokenLogprob> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return vec![TokenLogprob {
                token: String::new(),
                logprob: 0.0,
            }];
        }
        tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let mut h = self.key(req);
                h.str("logprob").str(&i.to_string());
                let v = h.finish_u64() % 3000;
                TokenLogprob {
                    token: tok.to_string(),
                    logprob: -(v as f64) / 1000.0,
                }
            })
            .collect()
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let start = Instant::now();
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        let text = match self.rules.iter().find(|r| r.matches(request)).map(|r| &r.reply) {
            Some(MockReply::Text(t)) => t.clone(),
            Some(MockReply::Echo) => {
                let mut lines: Vec<String> = Vec::new();
                for m in &request.messages {
                    for p in &m.parts {
                        match p {
                            ContentPart::Text(t) => lines.push(t.clone()),
                            ContentPart::Image(img) => lines.push(format!("[image {}]", img.digest)),
                        }
                    }
                }
                lines.join("\n")
            }
            Some(MockReply::Fail(msg)) => return Err(BackendError::Scripted(msg.clone())),
            Some(MockReply::With(f)) => f(request),
            None => self.default_reply(request),
        };
        let token_logprobs = request.want_logprobs.then(|| self.logprobs_for(request, &text));
        Ok(ChatResponse {
            text,
            token_logprobs,
            backend_id: self.id.clone(),
            latency: start.elapsed(),
        })
    }
}

// ---------------------------------------------------------------------------
// Remote backend

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
    /// Seed for the mock backend.
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            auth_env: "OPENAI_API_KEY".into(),
            max_parallel: 4,
            retry: RetryPolicy::default(),
            timeout_secs: 120,
            seed: 0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_parallel == 0 {
            return Err(BackendError::Config("max_parallel must be >= 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.kind == BackendKind::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(BackendError::Config("remote backend requires endpoint and model".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(self.seed).with_max_parallel(self.max_parallel)),
            BackendKind::Remote => Arc::new(RemoteBackend::from_config(self)?),
        })
    }
}

/// Counting semaphore bounding concurrent in-flight HTTP requests.
struct InFlight {
    limit: usize,
    count: Mutex<usize>,
    freed: Condvar,
}

struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            count: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    id: String,
    endpoint: String,
    model: String,
    token: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl RemoteBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.clone().unwrap_or_default();
        let model = cfg.model.clone().unwrap_or_default();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            id: format!("remote:{model}"),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            token: std::env::var(&cfg.auth_env).ok().filter(|t| !t.is_empty()),
            model,
            retry: cfg.retry,
            client,
            in_flight: InFlight::new(cfg.max_parallel),
        })
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint)
    }

    fn send_once(&self, body: &Value) -> Result<Value, (bool, BackendError)> {
        let _slot = self.in_flight.acquire();
        let mut req = self.client.post(self.url()).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            (
                true,
                BackendError::Transport {
                    attempts: 0,
                    message: e.to_string(),
                },
            )
        })?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err((true, BackendError::RateLimited { attempts: 0 }));
        }
        let text = resp.text().map_err(|e| {
            (
                true,
                BackendError::Transport {
                    attempts: 0,
                    message: e.to_string(),
                },
            )
        })?;
        if !status.is_success() {
            return Err((
                status.is_server_error(),
                BackendError::Transport {
                    attempts: 0,
                    message: format!("HTTP {status}: {text}"),
                },
            ));
        }
        serde_json::from_str(&text).map_err(|e| (false, BackendError::InvalidResponse(e.to_string())))
    }
}

/// Request body for an OpenAI-compatible chat-completions endpoint.
pub fn openai_request_body(model: &str, req: &ChatRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => json!({"type": "text", "text": t}),
                    ContentPart::Image(img) => json!({
                        "type": "image_url",
                        "image_url": {"url": img.data_url()}
                    }),
                })
                .collect();
            json!({"role": m.role, "content": content})
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    });
    if req.want_logprobs {
        body["logprobs"] = json!(true);
    }
    body
}

/// Extracts the reply text and, when requested, per-token logprobs.
pub fn parse_openai_response(body: &Value, want_logprobs: bool) -> Result<(String, Option<Vec<TokenLogprob>>), BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidResponse("missing choices[0]".into()))?;
    let text = match &choice["message"]["content"] {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(BackendError::InvalidResponse("missing message content".into())),
    };
    if !want_logprobs {
        return Ok((text, None));
    }
    let content = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| BackendError::UnsupportedCapability("token logprobs".into()))?;
    let mut out = Vec::with_capacity(content.len());
    for entry in content {
        let token = entry["token"].as_str().unwrap_or_default().to_string();
        let logprob = entry["logprob"]
            .as_f64()
            .ok_or_else(|| BackendError::InvalidResponse("logprob is not a number".into()))?;
        out.push(TokenLogprob {
            token,
            logprob: logprob.min(0.0),
        });
    }
    Ok((text, Some(out)))
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_parallel(&self) -> usize {
        self.in_flight.limit
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let start = Instant::now();
        let body = openai_request_body(&self.model, request);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&body) {
                Ok(value) => {
                    let (text, token_logprobs) = parse_openai_response(&value, request.want_logprobs)?;
                    return Ok(ChatResponse {
                        text,
                        token_logprobs,
                        backend_id: self.id.clone(),
                        latency: start.elapsed(),
                    });
                }
                Err((retryable, err)) => {
                    if !retryable || attempt >= self.retry.max_attempts {
                        return Err(match err {
                            BackendError::Transport { message, .. } => BackendError::Transport {
                                attempts: attempt,
                                message,
                            },
                            BackendError::RateLimited { .. } => BackendError::RateLimited { attempts: attempt },
                            other => other,
                        });
                    }
                    let backoff = self.retry.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    }
}
