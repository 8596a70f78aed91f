//! Model invocation.
//!
//! [`Backend`] is the only way the pipeline talks to a model. Implementations:
//!
//! - [`RemoteBackend`]: chat-completions HTTP client, images as base64 data URLs.
//! - [`ScriptedBackend`]: canned texts keyed by `(case_id, role, sample)`.
//! - [`OracleBackend`]: answers with the ground truth in canonical grammar.
//! - [`RecordingBackend`] / [`ReplayBackend`]: capture any backend's traffic
//!   to a line-delimited log and serve it back without a server.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::BusCase;
use crate::imaging::{remap_box, ImageBuffer, ResizeBounds};
use crate::protocol::{self, AgentRole, BoxCoords, Prompt};

pub const REPLAY_SCHEMA_VERSION: u32 = 1;
pub const ORACLE_RATIONALE: &str = "Ground-truth evidence.";

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response schema violation: {message}")]
    Schema { message: String },
    #[error("scripted failure for {case_id}/{role}/{sample}: {message}")]
    Script { case_id: String, role: String, sample: u32, message: String },
    #[error("replay: {message}")]
    Replay { message: String },
    #[error("invalid request: {message}")]
    InvalidRequest { message: String },
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }

    fn schema(message: impl Into<String>) -> Self {
        BackendError::Schema { message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        BackendError::InvalidRequest { message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, seed: None }
    }

    pub fn rollout() -> Self {
        Self { temperature: 0.8, max_tokens: 1024, seed: None }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::greedy()
    }
}

#[derive(Debug, Clone)]
pub struct Attachment {
    pub name: String,
    pub image: Arc<ImageBuffer>,
}

/// One call to a model. `sample_indices.len()` is the number of completions
/// requested; the indices identify the rollout samples they belong to.
#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub case_id: String,
    pub role: AgentRole,
    pub prompt: String,
    pub images: Vec<Attachment>,
    pub sampling: SamplingParams,
    pub sample_indices: Vec<u32>,
}

#[derive(Serialize)]
struct FingerprintView<'a> {
    case_id: &'a str,
    role: AgentRole,
    prompt: &'a str,
    images: Vec<ImageDigest>,
    temperature: f64,
    max_tokens: u32,
    seed: Option<u64>,
    sample_indices: &'a [u32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDigest {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
}

impl BackendRequest {
    /// Builds a request from a rendered prompt, checking that every image
    /// the prompt refers to is attached with matching dimensions.
    pub fn from_prompt(
        case_id: &str,
        prompt: &Prompt,
        images: &[Attachment],
        sampling: SamplingParams,
        sample_indices: Vec<u32>,
    ) -> Result<Self, BackendError> {
        let mut attached = Vec::with_capacity(prompt.images.len());
        for r in &prompt.images {
            let a = images
                .iter()
                .find(|a| a.name == r.name)
                .ok_or_else(|| BackendError::invalid(format!("prompt image {:?} is not attached", r.name)))?;
            if a.image.width() != r.width || a.image.height() != r.height {
                return Err(BackendError::invalid(format!("attachment {:?} has wrong dimensions", r.name)));
            }
            attached.push(a.clone());
        }
        let req = Self {
            case_id: case_id.to_string(),
            role: prompt.role,
            prompt: prompt.text.clone(),
            images: attached,
            sampling,
            sample_indices,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn n(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.sample_indices.is_empty() {
            return Err(BackendError::invalid("n must be at least 1"));
        }
        let t = self.sampling.temperature;
        if !(t.is_finite() && t >= 0.0) {
            return Err(BackendError::invalid(format!("temperature must be >= 0, got {t}")));
        }
        Ok(())
    }

    pub fn image_digests(&self) -> Vec<ImageDigest> {
        self.images
            .iter()
            .map(|a| ImageDigest {
                name: a.name.clone(),
                width: a.image.width(),
                height: a.image.height(),
                sha256: a.image.digest(),
            })
            .collect()
    }

    /// SHA-256 over everything that determines the response.
    pub fn fingerprint(&self) -> String {
        let view = FingerprintView {
            case_id: &self.case_id,
            role: self.role,
            prompt: &self.prompt,
            images: self.image_digests(),
            temperature: self.sampling.temperature,
            max_tokens: self.sampling.max_tokens,
            seed: self.sampling.seed,
            sample_indices: &self.sample_indices,
        };
        let bytes = serde_json::to_vec(&view).expect("fingerprint view serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub completions: Vec<Completion>,
    pub latency_ms: u64,
    #[serde(default)]
    pub usage: Option<TokenUsage>,
}

impl BackendResponse {
    fn of_texts(texts: Vec<String>, started: Instant) -> Self {
        Self {
            completions: texts
                .into_iter()
                .map(|text| Completion { text, finish_reason: "stop".into() })
                .collect(),
            latency_ms: started.elapsed().as_millis() as u64,
            usage: None,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Returns exactly `req.n()` completions, or an error. Never a partial
    /// success.
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError>;

    fn describe(&self) -> String;
}

/// The backend used for each agent role.
#[derive(Clone)]
pub struct Backends {
    pub main: Arc<dyn Backend>,
    pub sub: Arc<dyn Backend>,
    pub rewriter: Arc<dyn Backend>,
}

impl Backends {
    pub fn uniform(b: Arc<dyn Backend>) -> Self {
        Self { main: b.clone(), sub: b.clone(), rewriter: b }
    }

    pub fn for_role(&self, role: AgentRole) -> &dyn Backend {
        match role {
            AgentRole::MainLocalizer | AgentRole::MainIntegrator => self.main.as_ref(),
            AgentRole::SubAttribute => self.sub.as_ref(),
            AgentRole::Rewriter => self.rewriter.as_ref(),
        }
    }
}

/// Routes each request to the backend for its role.
impl Backend for Backends {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.for_role(req.role).invoke(req)
    }

    fn describe(&self) -> String {
        format!("main={}, sub={}, rewriter={}", self.main.describe(), self.sub.describe(), self.rewriter.describe())
    }
}

/// Answers every role with the case's ground truth.
///
/// Localizer boxes are mapped into the resized frame the localizer sees.
pub struct OracleBackend {
    cases: HashMap<String, BusCase>,
    bounds: ResizeBounds,
}

impl OracleBackend {
    pub fn new(cases: &[BusCase], bounds: ResizeBounds) -> Self {
        Self { cases: cases.iter().map(|c| (c.case_id.clone(), c.clone())).collect(), bounds }
    }

    fn answer(&self, case: &BusCase, role: AgentRole) -> Result<String, BackendError> {
        Ok(match role {
            AgentRole::MainLocalizer => {
                let (w, h) = case.native_dims();
                let scale = self.bounds.scale_for(w, h);
                let (ow, oh) = self.bounds.output_dims(w, h);
                let b = remap_box(&case.gt_box, scale, ow, oh)
                    .map_err(|e| BackendError::invalid(format!("oracle cannot map gt box: {e}")))?;
                let coords = BoxCoords { x1: b.x1 as u32, y1: b.y1 as u32, x2: b.x2 as u32, y2: b.y2 as u32 };
                protocol::render_box_answer(ORACLE_RATIONALE, &coords)
            }
            AgentRole::SubAttribute => protocol::render_attribute_answer(ORACLE_RATIONALE, &case.gt_attributes),
            AgentRole::MainIntegrator | AgentRole::Rewriter => {
                protocol::render_diagnosis_answer(ORACLE_RATIONALE, &case.gt_diagnosis, None)
            }
        })
    }
}

impl Backend for OracleBackend {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let started = Instant::now();
        req.validate()?;
        let case = self
            .cases
            .get(&req.case_id)
            .ok_or_else(|| BackendError::invalid(format!("oracle has no ground truth for {}", req.case_id)))?;
        let text = self.answer(case, req.role)?;
        Ok(BackendResponse::of_texts(vec![text; req.n()], started))
    }

    fn describe(&self) -> String {
        format!("oracle({} cases)", self.cases.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text { text: String },
    Fail { error: String },
}

/// One line of a mock script file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptLine {
    pub case_id: String,
    pub role: AgentRole,
    /// Applies to every sample when absent.
    #[serde(default)]
    pub sample: Option<u32>,
    #[serde(flatten)]
    pub entry: ScriptEntry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub case_id: String,
    pub role: AgentRole,
    pub sample_indices: Vec<u32>,
    pub prompt: String,
}

/// Returns pre-scripted texts keyed by `(case_id, role, sample index)`.
#[derive(Default)]
pub struct ScriptedBackend {
    entries: HashMap<(String, AgentRole, Option<u32>), ScriptEntry>,
    calls: Mutex<Vec<CallRecord>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_text(mut self, case_id: &str, role: AgentRole, sample: Option<u32>, text: impl Into<String>) -> Self {
        self.insert(case_id, role, sample, ScriptEntry::Text { text: text.into() });
        self
    }

    pub fn with_failure(mut self, case_id: &str, role: AgentRole, sample: Option<u32>, error: impl Into<String>) -> Self {
        self.insert(case_id, role, sample, ScriptEntry::Fail { error: error.into() });
        self
    }

    pub fn insert(&mut self, case_id: &str, role: AgentRole, sample: Option<u32>, entry: ScriptEntry) {
        self.entries.insert((case_id.to_string(), role, sample), entry);
    }

    /// Loads a line-delimited script file of [`ScriptLine`] records.
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut s = Self::new();
        let reader = BufReader::new(File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: ScriptLine = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("script line {}: {e}", i + 1))
            })?;
            s.insert(&l.case_id, l.role, l.sample, l.entry);
        }
        Ok(s)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    /// Number of invocations made for `role`.
    pub fn call_count(&self, role: AgentRole) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| c.role == role).count()
    }

    fn lookup(&self, case_id: &str, role: AgentRole, sample: u32) -> Option<&ScriptEntry> {
        self.entries
            .get(&(case_id.to_string(), role, Some(sample)))
            .or_else(|| self.entries.get(&(case_id.to_string(), role, None)))
    }
}

impl Backend for ScriptedBackend {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let started = Instant::now();
        req.validate()?;
        self.calls.lock().unwrap().push(CallRecord {
            case_id: req.case_id.clone(),
            role: req.role,
            sample_indices: req.sample_indices.clone(),
            prompt: req.prompt.clone(),
        });
        let mut texts = Vec::with_capacity(req.n());
        for &ix in &req.sample_indices {
            let fail = |message: String| BackendError::Script {
                case_id: req.case_id.clone(),
                role: req.role.as_str().into(),
                sample: ix,
                message,
            };
            match self.lookup(&req.case_id, req.role, ix) {
                Some(ScriptEntry::Text { text }) => texts.push(text.clone()),
                Some(ScriptEntry::Fail { error }) => return Err(fail(error.clone())),
                None => return Err(fail("no script entry".into())),
            }
        }
        Ok(BackendResponse::of_texts(texts, started))
    }

    fn describe(&self) -> String {
        format!("scripted({} entries)", self.entries.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiSample {
    /// Try one request with `n`; fall back to sequential requests if rejected.
    #[default]
    Auto,
    Always,
    Never,
}

fn default_path() -> String {
    "/chat/completions".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub multi_sample: MultiSample,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path: default_path(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
            multi_sample: MultiSample::Auto,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), self.path.trim_start_matches('/'))
    }
}

struct Gate {
    max: usize,
    used: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), used: Mutex::new(0), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.cv.wait(used).unwrap();
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

const N_UNKNOWN: u8 = 0;
const N_SUPPORTED: u8 = 1;
const N_REJECTED: u8 = 2;

/// Chat-completions client.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
    gate: Gate,
    n_support: AtomicU8,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        let token = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::invalid(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport { attempts: 0, message: e.to_string() })?;
        let n_support = match cfg.multi_sample {
            MultiSample::Auto => N_UNKNOWN,
            MultiSample::Always => N_SUPPORTED,
            MultiSample::Never => N_REJECTED,
        };
        Ok(Self { gate: Gate::new(cfg.max_in_flight), cfg, client, token, n_support: AtomicU8::new(n_support) })
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let url = self.cfg.endpoint();
        let mut last = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut rb = self.client.post(&url).json(body);
            if let Some(t) = &self.token {
                rb = rb.bearer_auth(t);
            }
            match rb.send() {
                Err(e) => {
                    log::warn!("request to {url} failed (attempt {}): {e}", attempt + 1);
                    last = Some(BackendError::Transport { attempts: attempt + 1, message: e.to_string() });
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    })?;
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|e| BackendError::schema(format!("response is not JSON: {e}")));
                    }
                    let err = BackendError::Status { status: status.as_u16(), body: truncate(&text, 2000) };
                    if status.is_server_error() || status.as_u16() == 429 {
                        log::warn!("{url} returned {status} (attempt {})", attempt + 1);
                        last = Some(err);
                    } else {
                        return Err(err);
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn request_n(&self, req: &BackendRequest, n: usize, seed: Option<u64>) -> Result<Vec<Completion>, BackendError> {
        let body = chat_request_body(&self.cfg.model, req, n, seed)?;
        let resp = self.post(&body)?;
        let (completions, _) = parse_chat_response(&resp)?;
        Ok(completions)
    }

    fn sequential(&self, req: &BackendRequest) -> Result<Vec<Completion>, BackendError> {
        let mut out = Vec::with_capacity(req.n());
        for &ix in &req.sample_indices {
            let seed = req.sampling.seed.map(|s| s.wrapping_add(ix as u64));
            let mut c = self.request_n(req, 1, seed)?;
            if c.len() != 1 {
                return Err(BackendError::schema(format!("expected 1 choice, got {}", c.len())));
            }
            out.push(c.remove(0));
        }
        Ok(out)
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &s[..end])
}

impl Backend for RemoteBackend {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        req.validate()?;
        let _permit = self.gate.acquire();
        let started = Instant::now();
        let n = req.n();
        let completions = if n == 1 || self.n_support.load(Ordering::Relaxed) == N_REJECTED {
            self.sequential(req)?
        } else {
            match self.request_n(req, n, req.sampling.seed) {
                Ok(c) if c.len() == n => {
                    self.n_support.store(N_SUPPORTED, Ordering::Relaxed);
                    c
                }
                Ok(c) if c.len() == 1 && self.cfg.multi_sample == MultiSample::Auto => {
                    log::info!("server ignored n={n}; switching to sequential sampling");
                    self.n_support.store(N_REJECTED, Ordering::Relaxed);
                    self.sequential(req)?
                }
                Ok(c) => return Err(BackendError::schema(format!("expected {n} choices, got {}", c.len()))),
                Err(BackendError::Status { status: 400 | 422, .. })
                    if self.cfg.multi_sample == MultiSample::Auto =>
                {
                    log::info!("server rejected n={n}; switching to sequential sampling");
                    self.n_support.store(N_REJECTED, Ordering::Relaxed);
                    self.sequential(req)?
                }
                Err(e) => return Err(e),
            }
        };
        Ok(BackendResponse { completions, latency_ms: started.elapsed().as_millis() as u64, usage: None })
    }

    fn describe(&self) -> String {
        format!("remote({}, model {})", self.cfg.endpoint(), self.cfg.model)
    }
}

/// The chat-completions JSON body for `req`, with `n` completions.
pub fn chat_request_body(model: &str, req: &BackendRequest, n: usize, seed: Option<u64>) -> Result<Value, BackendError> {
    let mut content = Vec::with_capacity(req.images.len() + 1);
    for a in &req.images {
        let png = a.image.encode_png().map_err(|e| BackendError::invalid(e.to_string()))?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        content.push(json!({
            "type": "image_url",
            "image_url": { "url": format!("data:image/png;base64,{b64}") }
        }));
    }
    content.push(json!({ "type": "text", "text": req.prompt }));
    let mut body = json!({
        "model": model,
        "messages": [{ "role": "user", "content": content }],
        "temperature": req.sampling.temperature,
        "max_tokens": req.sampling.max_tokens,
    });
    if n > 1 {
        body["n"] = json!(n);
    }
    if let Some(s) = seed {
        body["seed"] = json!(s);
    }
    Ok(body)
}

/// Extracts completions and usage from a chat-completions response.
pub fn parse_chat_response(v: &Value) -> Result<(Vec<Completion>, Option<TokenUsage>), BackendError> {
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::schema("missing choices array"))?;
    let mut out = Vec::with_capacity(choices.len());
    for (i, c) in choices.iter().enumerate() {
        let content = c
            .get("message")
            .and_then(|m| m.get("content"))
            .ok_or_else(|| BackendError::schema(format!("choice {i} has no message content")))?;
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .concat(),
            _ => return Err(BackendError::schema(format!("choice {i} content is not text"))),
        };
        let finish_reason = c.get("finish_reason").and_then(Value::as_str).unwrap_or("unknown").to_string();
        out.push(Completion { text, finish_reason });
    }
    let usage = v.get("usage").and_then(|u| {
        Some(TokenUsage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((out, usage))
}

/// One captured request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub version: u32,
    pub fingerprint: String,
    pub case_id: String,
    pub role: AgentRole,
    pub sample_indices: Vec<u32>,
    pub prompt: String,
    pub images: Vec<ImageDigest>,
    pub sampling: SamplingParams,
    pub outcome: ReplayOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayOutcome {
    Ok(BackendResponse),
    Err(BackendError),
}

/// Wraps a backend and appends every exchange to a capture log.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    out: Mutex<BufWriter<File>>,
}

impl RecordingBackend {
    /// Appends to `path`, creating it if needed.
    pub fn new(inner: Arc<dyn Backend>, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner, out: Mutex::new(BufWriter::new(f)) })
    }
}

impl Backend for RecordingBackend {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let result = self.inner.invoke(req);
        let entry = ReplayEntry {
            version: REPLAY_SCHEMA_VERSION,
            fingerprint: req.fingerprint(),
            case_id: req.case_id.clone(),
            role: req.role,
            sample_indices: req.sample_indices.clone(),
            prompt: req.prompt.clone(),
            images: req.image_digests(),
            sampling: req.sampling,
            outcome: match &result {
                Ok(r) => ReplayOutcome::Ok(r.clone()),
                Err(e) => ReplayOutcome::Err(e.clone()),
            },
        };
        let line = serde_json::to_string(&entry).expect("replay entry serializes");
        let mut out = self.out.lock().unwrap();
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            log::error!("cannot write capture log: {e}");
        }
        result
    }

    fn describe(&self) -> String {
        format!("recording({})", self.inner.describe())
    }
}

/// Serves responses from a capture log, matched by request fingerprint.
pub struct ReplayBackend {
    entries: Mutex<HashMap<String, VecDeque<ReplayOutcome>>>,
    total: usize,
}

impl ReplayBackend {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries: HashMap<String, VecDeque<ReplayOutcome>> = HashMap::new();
        let mut total = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("capture line {}: {e}", i + 1))
            })?;
            if e.version != REPLAY_SCHEMA_VERSION {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("capture line {}: unsupported version {}", i + 1, e.version),
                ));
            }
            entries.entry(e.fingerprint).or_default().push_back(e.outcome);
            total += 1;
        }
        Ok(Self { entries: Mutex::new(entries), total })
    }

    /// Entries not yet served.
    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap().values().map(VecDeque::len).sum()
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

impl Backend for ReplayBackend {
    fn invoke(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let fp = req.fingerprint();
        let outcome = self.entries.lock().unwrap().get_mut(&fp).and_then(VecDeque::pop_front);
        match outcome {
            Some(ReplayOutcome::Ok(r)) => Ok(r),
            Some(ReplayOutcome::Err(e)) => Err(e),
            None => Err(BackendError::Replay {
                message: format!("no recording for {} {} (fingerprint {fp})", req.case_id, req.role.as_str()),
            }),
        }
    }

    fn describe(&self) -> String {
        format!("replay({} entries)", self.total)
    }
}
