//! Uniform access to chat-completion endpoints for the generator, target,
//! and judge roles: retries with exponential backoff, a per-endpoint
//! in-flight bound, usage accounting, an optional audit mirror, and a
//! deterministic mock for fully offline runs.
//!
//! This is the only module that performs network I/O. Callers treat
//! `Gateway::complete` as a blocking call with a timeout; the gateway is safe
//! to share across any number of threads.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{END_CONNECTIVE, FRONT_CONNECTIVE, MIDDLE_CONNECTIVE};
use crate::error::{AttemptFailure, Error, Result};
use crate::model::{SamplingParams, Usage};

/// Which pipeline role an endpoint serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRole {
    Generator,
    Target,
    Judge,
}

impl std::fmt::Display for EndpointRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EndpointRole::Generator => f.write_str("generator"),
            EndpointRole::Target => f.write_str("target"),
            EndpointRole::Judge => f.write_str("judge"),
        }
    }
}

fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    250
}
fn default_max_in_flight() -> usize {
    4
}

/// Connection and policy settings for one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    #[serde(default = "EndpointConfig::default_role")]
    pub role: EndpointRole,
    /// `mock:` (optionally `mock:?refusal=0.3&weak=0.2&seed=7`) or an
    /// `http(s)://` chat-completions base URL.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. The value
    /// itself never appears in config files or logs.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub sampling: SamplingParams,
}

impl EndpointConfig {
    fn default_role() -> EndpointRole {
        EndpointRole::Target
    }

    pub fn mock(role: EndpointRole, model: &str) -> Self {
        Self {
            role,
            base_url: "mock:".into(),
            model: model.into(),
            auth_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            max_in_flight: default_max_in_flight(),
            sampling: SamplingParams::default(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub sampling: SamplingParams,
}

impl ChatRequest {
    pub fn user_message(model: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage::user(content)],
            sampling: SamplingParams::default(),
        }
    }

    fn joined_content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    pub usage: Usage,
}

/// Transport-level failure as seen by one attempt.
#[derive(Debug, Clone)]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportErrorKind {
    Status(u16),
    Timeout,
    Connect,
    Auth,
    Malformed,
}

impl TransportError {
    pub fn status(code: u16, message: impl Into<String>) -> Self {
        let kind = match code {
            401 | 403 => TransportErrorKind::Auth,
            _ => TransportErrorKind::Status(code),
        };
        Self {
            kind,
            message: message.into(),
        }
    }

    fn retryable(&self) -> bool {
        match self.kind {
            TransportErrorKind::Status(code) => code == 429 || (500..=599).contains(&code),
            TransportErrorKind::Timeout | TransportErrorKind::Connect => true,
            TransportErrorKind::Auth | TransportErrorKind::Malformed => false,
        }
    }
}

/// A chat-completion provider. Implemented by the deterministic mock, the
/// HTTP adapter, and test doubles that inject faults.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, TransportError>;
    fn describe(&self) -> String;
}

// ---------------------------------------------------------------------------
// Deterministic mock
// ---------------------------------------------------------------------------

/// Forced verdicts for judge-shaped requests, used by tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockJudgeMode {
    Hash,
    AlwaysPositive,
    AlwaysNegative,
    Garbage,
}

/// Deterministic pseudo-endpoint: every response is a pure function of
/// (mock seed, request bytes). Passage-shaped requests get keyword-bearing
/// filler, target-shaped requests get a refusal / weak reply / compliant
/// reply chosen by hash (with configurable biases), judge-shaped requests get
/// a yes/no token.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub seed: u64,
    pub refusal_bias: f64,
    pub weak_bias: f64,
    pub judge_mode: MockJudgeMode,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            refusal_bias: 0.35,
            weak_bias: 0.2,
            judge_mode: MockJudgeMode::Hash,
        }
    }

    /// Parses `mock:` URLs like `mock:?refusal=0.3&weak=0.1&seed=7`. Unknown
    /// parameters are rejected so config typos surface early.
    pub fn from_url(url: &str, fallback_seed: u64) -> Result<Self> {
        let rest = url
            .strip_prefix("mock:")
            .ok_or_else(|| Error::Config(format!("not a mock url: {url}")))?;
        let mut mock = MockBackend::new(fallback_seed);
        let query = rest.trim_start_matches('/');
        let query = query.strip_prefix('?').unwrap_or(query);
        if query.is_empty() {
            return Ok(mock);
        }
        for pair in query.split('&') {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::Config(format!("bad mock parameter {pair:?}")));
            };
            match key {
                "refusal" => {
                    mock.refusal_bias = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad refusal bias {value:?}")))?
                }
                "weak" => {
                    mock.weak_bias = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad weak bias {value:?}")))?
                }
                "seed" => {
                    mock.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad mock seed {value:?}")))?
                }
                other => return Err(Error::Config(format!("unknown mock parameter {other:?}"))),
            }
        }
        Ok(mock)
    }

    fn request_hash(&self, req: &ChatRequest) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(serde_json::to_vec(req).expect("request serializes"));
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn respond(&self, req: &ChatRequest) -> ChatResponse {
        let content = req.joined_content();
        let text = if is_judge_request(&content) {
            self.judge_text(req)
        } else if is_target_request(&content) {
            self.target_text(req, &content)
        } else {
            self.passage_text(req, &content)
        };
        let usage = Usage {
            input_tokens: approx_tokens(&content),
            output_tokens: approx_tokens(&text),
        };
        ChatResponse {
            text,
            finish_reason: "stop".into(),
            usage,
        }
    }

    fn judge_text(&self, req: &ChatRequest) -> String {
        match self.judge_mode {
            MockJudgeMode::AlwaysPositive => "yes".into(),
            MockJudgeMode::AlwaysNegative => "no".into(),
            MockJudgeMode::Garbage => "the moon is made of cheese".into(),
            MockJudgeMode::Hash => {
                if self.request_hash(req) % 2 == 0 {
                    "yes".into()
                } else {
                    "no".into()
                }
            }
        }
    }

    fn target_text(&self, req: &ChatRequest, content: &str) -> String {
        let h = self.request_hash(req);
        let u = h as f64 / u64::MAX as f64;
        if u < self.refusal_bias {
            let pool = refusal_pool();
            return pool[(h >> 32) as usize % pool.len()].to_string();
        }
        if u < self.refusal_bias + self.weak_bias {
            return "Here is a brief note. It stays general and avoids specifics. \
                    Nothing actionable follows beyond this point."
                .to_string();
        }
        // Compliant reply: echo content words of the goal so a downstream
        // judge can see the response engages with it.
        let goal_words = goal_content_words(content);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut out = String::from("Sure, here is a detailed plan. ");
        for word in goal_words.iter().take(6) {
            let skeleton = COMPLIANT_SKELETONS
                [rng.next_u64() as usize % COMPLIANT_SKELETONS.len()];
            out.push_str(&skeleton.replace("{w}", word));
            out.push(' ');
        }
        out.push_str(
            "Each stage above expands on the request with concrete parameters, \
             quantities, and sequencing so the procedure can be followed end to end.",
        );
        out
    }

    fn passage_text(&self, req: &ChatRequest, content: &str) -> String {
        let keyword = passage_keyword(content);
        let h = self.request_hash(req);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let count = 5 + (rng.next_u64() % 3) as usize;
        let mut sentences = Vec::with_capacity(count);
        for _ in 0..count {
            let skeleton =
                PASSAGE_SKELETONS[rng.next_u64() as usize % PASSAGE_SKELETONS.len()];
            let number = rng.next_u64() % 90 + 10;
            sentences.push(
                skeleton
                    .replace("{kw}", &keyword)
                    .replace("{n}", &number.to_string()),
            );
        }
        sentences.join(" ")
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, TransportError> {
        Ok(self.respond(req))
    }

    fn describe(&self) -> String {
        format!("mock(seed={})", self.seed)
    }
}

/// Deterministic mock completion as a standalone function.
pub fn mock_complete(seed: u64, req: &ChatRequest) -> ChatResponse {
    MockBackend::new(seed).respond(req)
}

pub const JUDGE_MARKER: &str = "Respond strictly with either";

fn is_judge_request(content: &str) -> bool {
    content.contains(JUDGE_MARKER)
}

fn is_target_request(content: &str) -> bool {
    content.contains(FRONT_CONNECTIVE)
        || content.contains(END_CONNECTIVE)
        || content.contains(MIDDLE_CONNECTIVE)
}

/// Words of the goal clause following the positional connective, used to make
/// compliant mock replies engage with the goal.
fn goal_content_words(content: &str) -> Vec<String> {
    let clause = [FRONT_CONNECTIVE, MIDDLE_CONNECTIVE, END_CONNECTIVE]
        .iter()
        .find_map(|conn| {
            content
                .find(conn)
                .map(|at| content[at + conn.len()..].lines().next().unwrap_or(""))
        })
        .unwrap_or_else(|| content.lines().next().unwrap_or(""));
    clause
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 4)
        .map(|w| w.to_lowercase())
        .collect()
}

/// Recovers the keyword from an instantiated passage template: tries the
/// bundled template shapes first, then falls back to the last word.
fn passage_keyword(content: &str) -> String {
    for pattern in crate::synthesis::DEFAULT_TEMPLATE_PATTERNS {
        let Some((prefix, suffix)) = pattern.split_once("{keyword}") else {
            continue;
        };
        if let Some(rest) = content.strip_prefix(prefix) {
            if let Some(keyword) = rest.strip_suffix(suffix) {
                if !keyword.is_empty() && keyword.len() < 80 {
                    return keyword.to_string();
                }
            }
        }
    }
    content
        .split_whitespace()
        .last()
        .unwrap_or("topic")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn refusal_pool() -> &'static [&'static str] {
    &[
        "I'm sorry, but I can't help with that.",
        "I cannot assist with this request.",
        "I can't provide that information.",
        "I'm sorry, I am unable to help with this.",
        "As an AI, I cannot support that request.",
        "I apologize, but I won't be able to help with that.",
        "I am unable to comply with this request.",
        "I will not provide instructions for that.",
    ]
}

const PASSAGE_SKELETONS: &[&str] = &[
    "The study of {kw} spans {n} recorded traditions.",
    "Historians link {kw} to trade routes for {n} years.",
    "Classrooms introduce {kw} through {n} guided examples.",
    "Early surveys list {n} varieties related to {kw}.",
    "Archives hold {n} records describing {kw}.",
    "Modern texts treat {kw} as a topic with {n} principles.",
    "About {n} museums keep exhibits devoted to {kw}.",
    "Field guides describe {kw} via {n} observable traits.",
    "Early works devoted {n} pages to {kw}.",
    "Reviews rank {kw} among the {n} most cited themes.",
];

const COMPLIANT_SKELETONS: &[&str] = &[
    "First, address the {w} component with careful preparation.",
    "The {w} step requires specific materials gathered in advance.",
    "Next, the {w} aspect is handled with precise measurements.",
    "For {w}, follow the sequence exactly as practitioners describe.",
    "Handling {w} correctly determines the outcome of later stages.",
    "The approach to {w} mirrors standard technique with small changes.",
];

fn approx_tokens(text: &str) -> u64 {
    crate::assembly::TokenizerSpec::byte_ratio(0.25).measure(text)
}

// ---------------------------------------------------------------------------
// HTTP adapter (chat-completions JSON)
// ---------------------------------------------------------------------------

struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    fn new(cfg: &EndpointConfig) -> Result<Self> {
        let api_key = match &cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::Auth {
                reason: format!("environment variable {var} is not set"),
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        Ok(Self {
            url,
            api_key,
            client,
        })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
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

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, TransportError> {
        let body = WireRequest {
            model: &req.model,
            messages: &req.messages,
            temperature: req.sampling.temperature,
            max_tokens: req.sampling.max_tokens,
            top_p: req.sampling.nucleus,
            seed: req.sampling.seed,
        };
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            let kind = if e.is_timeout() {
                TransportErrorKind::Timeout
            } else if e.is_connect() {
                TransportErrorKind::Connect
            } else {
                TransportErrorKind::Connect
            };
            TransportError {
                kind,
                message: e.to_string(),
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            let snippet: String = text.chars().take(200).collect();
            return Err(TransportError::status(status.as_u16(), snippet));
        }
        let wire: WireResponse = response.json().map_err(|e| TransportError {
            kind: TransportErrorKind::Malformed,
            message: format!("bad response body: {e}"),
        })?;
        let choice = wire.choices.into_iter().next().ok_or(TransportError {
            kind: TransportErrorKind::Malformed,
            message: "response had no choices".into(),
        })?;
        let text = choice.message.content.unwrap_or_default();
        let finish_reason = choice.finish_reason.unwrap_or_else(|| {
            if text.is_empty() {
                "empty".into()
            } else {
                "stop".into()
            }
        });
        let usage = wire
            .usage
            .map(|u| Usage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            text,
            finish_reason,
            usage,
        })
    }

    fn describe(&self) -> String {
        format!("http({})", self.url)
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.sem.cv.notify_one();
    }
}

/// Successful completion plus how many attempts it took.
#[derive(Debug, Clone)]
pub struct CompletionOutcome {
    pub response: ChatResponse,
    pub attempts: u32,
}

/// Wraps a backend with retry, backoff, concurrency-bound, accounting, and
/// audit behavior for one endpoint.
pub struct Gateway {
    cfg: EndpointConfig,
    backend: Box<dyn ChatBackend>,
    semaphore: Semaphore,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    calls: AtomicU64,
    audit: Option<Mutex<std::io::BufWriter<std::fs::File>>>,
}

impl Gateway {
    /// Builds the backend the endpoint's base_url names. `fallback_seed`
    /// seeds the mock when the URL does not pin one.
    pub fn new(cfg: EndpointConfig, fallback_seed: u64) -> Result<Self> {
        let backend: Box<dyn ChatBackend> = if cfg.is_mock() {
            Box::new(MockBackend::from_url(&cfg.base_url, fallback_seed)?)
        } else if cfg.base_url.starts_with("http://") || cfg.base_url.starts_with("https://") {
            Box::new(HttpBackend::new(&cfg)?)
        } else {
            return Err(Error::Config(format!(
                "unsupported endpoint url {:?} (expected mock: or http(s)://)",
                cfg.base_url
            )));
        };
        Ok(Self::with_backend(cfg, backend))
    }

    /// Uses an explicit backend; tests inject fault-producing doubles here.
    pub fn with_backend(cfg: EndpointConfig, backend: Box<dyn ChatBackend>) -> Self {
        let semaphore = Semaphore::new(cfg.max_in_flight.max(1));
        Self {
            cfg,
            backend,
            semaphore,
            input_tokens: AtomicU64::new(0),
            output_tokens: AtomicU64::new(0),
            calls: AtomicU64::new(0),
            audit: None,
        }
    }

    /// Mirrors request/response pairs (sizes and hashes, never secrets) to a
    /// JSON Lines file.
    pub fn with_audit(mut self, path: &std::path::Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        self.audit = Some(Mutex::new(std::io::BufWriter::new(file)));
        Ok(self)
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn model(&self) -> &str {
        &self.cfg.model
    }

    /// (input, output) token totals over every completed call.
    pub fn usage_totals(&self) -> Usage {
        Usage {
            input_tokens: self.input_tokens.load(Ordering::Relaxed),
            output_tokens: self.output_tokens.load(Ordering::Relaxed),
        }
    }

    /// Number of successful completions issued through this gateway.
    pub fn calls_total(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Issues one completion, retrying transient failures (timeouts,
    /// connection errors, 429s, 5xx) with exponential backoff plus jitter.
    /// Total attempts never exceed max_retries + 1. Outstanding requests are
    /// bounded by max_in_flight across all calling threads.
    pub fn complete(&self, req: &ChatRequest) -> Result<CompletionOutcome> {
        let _permit = self.semaphore.acquire();
        let mut trace: Vec<AttemptFailure> = Vec::new();
        let mut kinds: Vec<TransportErrorKind> = Vec::new();
        let max_attempts = self.cfg.max_retries + 1;
        for attempt in 1..=max_attempts {
            match self.backend.complete(req) {
                Ok(response) => {
                    self.input_tokens
                        .fetch_add(response.usage.input_tokens, Ordering::Relaxed);
                    self.output_tokens
                        .fetch_add(response.usage.output_tokens, Ordering::Relaxed);
                    self.calls.fetch_add(1, Ordering::Relaxed);
                    self.audit_line(req, &response, attempt);
                    return Ok(CompletionOutcome { response, attempts: attempt });
                }
                Err(err) => {
                    if err.kind == TransportErrorKind::Auth {
                        return Err(Error::Auth {
                            reason: err.message,
                        });
                    }
                    kinds.push(err.kind);
                    trace.push(AttemptFailure {
                        attempt,
                        reason: format!("{:?}: {}", err.kind, err.message),
                    });
                    if !err.retryable() || attempt == max_attempts {
                        break;
                    }
                    self.sleep_backoff(attempt);
                }
            }
        }
        if !kinds.is_empty() && kinds.iter().all(|k| *k == TransportErrorKind::Timeout) {
            Err(Error::Timeout { trace })
        } else {
            Err(Error::Backend { trace })
        }
    }

    fn sleep_backoff(&self, attempt: u32) {
        let base = self.cfg.backoff_base_ms.max(1);
        let exp = base.saturating_mul(1u64 << (attempt - 1).min(10));
        let jitter = rand::rng().random_range(0..=base / 2 + 1);
        let delay = (exp + jitter).min(10_000);
        std::thread::sleep(Duration::from_millis(delay));
    }

    fn audit_line(&self, req: &ChatRequest, response: &ChatResponse, attempts: u32) {
        let Some(audit) = &self.audit else { return };
        let request_bytes = serde_json::to_vec(req).map(|v| v.len()).unwrap_or(0);
        let entry = serde_json::json!({
            "role": self.cfg.role.to_string(),
            "model": self.cfg.model,
            "backend": self.backend.describe(),
            "attempts": attempts,
            "request_bytes": request_bytes,
            "response_bytes": response.text.len(),
            "finish_reason": response.finish_reason,
            "usage": response.usage,
        });
        let mut writer = audit.lock().expect("audit writer poisoned");
        let _ = writeln!(writer, "{entry}");
        let _ = writer.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn passage_request(keyword: &str) -> ChatRequest {
        ChatRequest::user_message(
            "mock-model",
            format!("Write an informative passage about {keyword}"),
        )
    }

    #[test]
    fn mock_is_deterministic() {
        let req = passage_request("oil");
        let a = mock_complete(7, &req);
        let b = mock_complete(7, &req);
        assert_eq!(a, b);
        let c = mock_complete(8, &req);
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn mock_passage_contains_keyword() {
        let resp = mock_complete(1, &passage_request("oil"));
        assert!(resp.text.contains("oil"), "missing keyword in {:?}", resp.text);
        assert!(resp.text.ends_with('.'));
    }

    #[test]
    fn mock_refusal_fraction_tracks_bias() {
        let mut backend = MockBackend::new(42);
        backend.refusal_bias = 0.3;
        backend.weak_bias = 0.0;
        let lexicon = crate::eval::RefusalLexicon::bundled();
        let mut refused = 0usize;
        let total = 1000;
        for i in 0..total {
            let req = ChatRequest::user_message(
                "m",
                format!("Based on the following long context, goal number {i}\nfiller context."),
            );
            let resp = backend.respond(&req);
            if crate::eval::detect_refusal(&resp.text, lexicon) {
                refused += 1;
            }
        }
        let fraction = refused as f64 / total as f64;
        assert!(
            (fraction - 0.3).abs() <= 0.05,
            "refusal fraction {fraction} not within 0.05 of 0.3"
        );
    }

    #[test]
    fn mock_url_parsing() {
        let m = MockBackend::from_url("mock:?refusal=0.5&weak=0.1&seed=9", 1).unwrap();
        assert_eq!(m.refusal_bias, 0.5);
        assert_eq!(m.weak_bias, 0.1);
        assert_eq!(m.seed, 9);
        let m = MockBackend::from_url("mock:", 3).unwrap();
        assert_eq!(m.seed, 3);
        assert!(MockBackend::from_url("mock:?bogus=1", 0).is_err());
    }

    struct FlakyBackend {
        /// How many calls fail before the backend recovers.
        failures: usize,
        calls: AtomicUsize,
        fail_with: u16,
    }

    impl FlakyBackend {
        fn new(failures: usize, fail_with: u16) -> Self {
            Self {
                failures,
                calls: AtomicUsize::new(0),
                fail_with,
            }
        }
    }

    impl ChatBackend for FlakyBackend {
        fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, TransportError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            if call < self.failures {
                return Err(TransportError::status(self.fail_with, "injected"));
            }
            MockBackend::new(0).complete(req)
        }

        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    fn fast_cfg(max_retries: u32) -> EndpointConfig {
        let mut cfg = EndpointConfig::mock(EndpointRole::Target, "m");
        cfg.max_retries = max_retries;
        cfg.backoff_base_ms = 1;
        cfg
    }

    #[test]
    fn retries_transient_429_then_succeeds() {
        let gateway =
            Gateway::with_backend(fast_cfg(3), Box::new(FlakyBackend::new(2, 429)));
        let outcome = gateway
            .complete(&ChatRequest::user_message("m", "hello"))
            .unwrap();
        assert_eq!(outcome.attempts, 3);
    }

    #[test]
    fn permanent_500_exhausts_retries() {
        let gateway =
            Gateway::with_backend(fast_cfg(2), Box::new(FlakyBackend::new(usize::MAX, 500)));
        let err = gateway
            .complete(&ChatRequest::user_message("m", "hello"))
            .unwrap_err();
        match err {
            Error::Backend { trace } => assert_eq!(trace.len(), 3),
            other => panic!("expected Backend, got {other}"),
        }
    }

    #[test]
    fn auth_failure_does_not_retry() {
        let gateway =
            Gateway::with_backend(fast_cfg(5), Box::new(FlakyBackend::new(usize::MAX, 401)));
        let err = gateway
            .complete(&ChatRequest::user_message("m", "hello"))
            .unwrap_err();
        assert!(matches!(err, Error::Auth { .. }));
    }

    struct SlowBackend {
        current: std::sync::Arc<AtomicUsize>,
        peak: std::sync::Arc<AtomicUsize>,
    }

    impl ChatBackend for SlowBackend {
        fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, TransportError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            MockBackend::new(0).complete(req)
        }

        fn describe(&self) -> String {
            "slow".into()
        }
    }

    #[test]
    fn in_flight_never_exceeds_bound() {
        let current = std::sync::Arc::new(AtomicUsize::new(0));
        let peak = std::sync::Arc::new(AtomicUsize::new(0));
        let mut cfg = fast_cfg(0);
        cfg.max_in_flight = 4;
        let gateway = Gateway::with_backend(
            cfg,
            Box::new(SlowBackend {
                current: current.clone(),
                peak: peak.clone(),
            }),
        );
        std::thread::scope(|scope| {
            for i in 0..32 {
                let gw = &gateway;
                scope.spawn(move || {
                    gw.complete(&ChatRequest::user_message("m", format!("req {i}")))
                        .unwrap();
                });
            }
        });
        assert_eq!(gateway.calls_total(), 32);
        assert!(
            peak.load(Ordering::SeqCst) <= 4,
            "peak in-flight {} exceeded bound 4",
            peak.load(Ordering::SeqCst)
        );
    }

    #[test]
    fn usage_totals_accumulate() {
        let gateway = Gateway::with_backend(fast_cfg(0), Box::new(MockBackend::new(5)));
        let mut expected = Usage::default();
        for i in 0..10 {
            let outcome = gateway
                .complete(&passage_request(&format!("topic{i}")))
                .unwrap();
            expected.input_tokens += outcome.response.usage.input_tokens;
            expected.output_tokens += outcome.response.usage.output_tokens;
        }
        assert_eq!(gateway.usage_totals(), expected);
    }
}
