//! Completion backends.
//!
//! [`HttpBackend`] talks to any OpenAI-compatible `/v1/completions` endpoint;
//! [`ScriptedBackend`] answers from a JSONL fixture keyed by the client's
//! message, for offline demos and deterministic tests. Both return a
//! [`CompletionResult`] and never fail past that boundary.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompt::{default_generation_params, GenerationParams, AI_PREFIX, HUMAN_PREFIX};

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionStatus {
    Ok,
    TransportError,
    ApiError,
    Timeout,
}

/// Status plus completion text. `text` is empty unless `status` is `Ok`;
/// error statuses always carry a non-empty `detail`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub status: CompletionStatus,
    pub text: String,
    pub detail: String,
}

impl CompletionResult {
    pub fn ok(text: impl Into<String>) -> Self {
        Self { status: CompletionStatus::Ok, text: text.into(), detail: String::new() }
    }

    pub fn failure(status: CompletionStatus, detail: impl Into<String>) -> Self {
        debug_assert_ne!(status, CompletionStatus::Ok);
        let mut detail = detail.into();
        if detail.trim().is_empty() {
            detail = "unspecified failure".to_string();
        }
        Self { status, text: String::new(), detail }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CompletionStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub params: GenerationParams,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, params: GenerationParams) -> Self {
        Self { prompt: prompt.into(), params }
    }

    fn check(&self) -> Result<(), String> {
        if self.prompt.trim().is_empty() {
            return Err("prompt is empty".to_string());
        }
        self.params.validate().map_err(|e| e.to_string())
    }
}

pub trait CompletionBackend: Send + Sync {
    /// Short identifier, e.g. `scripted` or `http`.
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> CompletionResult;

    /// Confirms the backend can serve a request. Never mutates state.
    fn health_check(&self) -> CompletionResult;
}

/// Cuts `text` before the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min().unwrap_or(text.len());
    &text[..cut]
}

/// The text of the final client message in a rendered prompt: everything
/// after the last `Human:` prefix up to the trailing `AI:`.
pub fn final_client_message(prompt: &str) -> Option<&str> {
    let body = prompt.trim_end();
    let body = body.strip_suffix(AI_PREFIX).unwrap_or(body);
    let start = match body.rfind(&format!("\n{HUMAN_PREFIX}")) {
        Some(i) => i + 1,
        None if body.starts_with(HUMAN_PREFIX) => 0,
        None => return None,
    };
    let message = body[start + HUMAN_PREFIX.len()..].trim();
    (!message.is_empty()).then_some(message)
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    #[serde(rename = "match")]
    key: String,
    completion: String,
}

/// Fixture-driven backend. A pure function of (fixture, prompt).
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    entries: HashMap<String, String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; the first entry for a given message wins.
    pub fn with_entry(mut self, client_message: &str, completion: &str) -> Self {
        self.entries.entry(client_message.trim().to_string()).or_insert_with(|| completion.to_string());
        self
    }

    /// Parses JSONL lines of the form `{"match": "...", "completion": "..."}`.
    /// Blank lines are skipped.
    pub fn from_jsonl_str(doc: &str) -> Result<Self, FixtureError> {
        let mut backend = Self::new();
        for (n, line) in doc.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureLine = serde_json::from_str(line)
                .map_err(|e| FixtureError::Malformed { line: n + 1, message: e.to_string() })?;
            if entry.key.trim().is_empty() {
                return Err(FixtureError::Malformed { line: n + 1, message: "empty match key".into() });
            }
            backend = backend.with_entry(&entry.key, &entry.completion);
        }
        Ok(backend)
    }

    pub fn from_file(path: &Path) -> Result<Self, FixtureError> {
        let doc = std::fs::read_to_string(path)
            .map_err(|source| FixtureError::Io { path: path.display().to_string(), source })?;
        Self::from_jsonl_str(&doc)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResult {
        if let Err(e) = request.check() {
            return CompletionResult::failure(CompletionStatus::ApiError, format!("invalid request: {e}"));
        }
        let Some(key) = final_client_message(&request.prompt) else {
            return CompletionResult::failure(CompletionStatus::ApiError, "prompt has no final Human: line");
        };
        match self.entries.get(key) {
            Some(text) => CompletionResult::ok(truncate_at_stop(text, &request.params.stop)),
            None => CompletionResult::failure(CompletionStatus::ApiError, format!("no fixture entry for {key:?}")),
        }
    }

    fn health_check(&self) -> CompletionResult {
        CompletionResult::ok("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendConfig {
    pub base_url: String,
    pub api_key_env_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each subsequent retry.
    pub retry_backoff: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key_env_name: DEFAULT_API_KEY_ENV.to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            retry_backoff: Duration::from_secs(1),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout.is_zero() {
            return Err(BackendError::InvalidConfig("timeout must be positive".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(BackendError::InvalidConfig("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/completions")
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

/// Body of a `/v1/completions` request: the model, the prompt and exactly
/// the sampling parameters of [`GenerationParams`].
#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
    stop: &'a [String],
}

pub fn request_body(request: &CompletionRequest) -> Value {
    let p = &request.params;
    serde_json::to_value(WireRequest {
        model: &p.model_id,
        prompt: &request.prompt,
        temperature: p.temperature,
        max_tokens: p.max_tokens,
        top_p: p.top_p,
        frequency_penalty: p.frequency_penalty,
        presence_penalty: p.presence_penalty,
        stop: &p.stop,
    })
    .expect("wire request serializes")
}

pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    health_model: String,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("has_api_key", &self.api_key.is_some())
            .field("health_model", &self.health_model)
            .finish()
    }
}

enum Attempt {
    Done(CompletionResult),
    Retryable(CompletionResult),
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in `config`.
    /// A missing key is reported at call time, not here.
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env_name).ok().filter(|k| !k.trim().is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self { config, api_key, health_model: default_generation_params().model_id })
    }

    /// Model used for the 1-token health check.
    pub fn set_health_model(&mut self, model: impl Into<String>) {
        self.health_model = model.into();
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// The blocking client owns a small runtime of its own, which must not be
    /// created or dropped on an async worker. Building one per call keeps
    /// `HttpBackend` safe to hold and drop anywhere.
    fn client(&self) -> Result<reqwest::blocking::Client, CompletionResult> {
        reqwest::blocking::Client::builder().timeout(self.config.timeout).build().map_err(|e| {
            CompletionResult::failure(CompletionStatus::TransportError, format!("building HTTP client: {e}"))
        })
    }

    fn attempt(&self, client: &reqwest::blocking::Client, key: &str, body: &str) -> Attempt {
        let response = client
            .post(self.config.completions_url())
            .bearer_auth(key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send();
        let response = match response {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Attempt::Retryable(CompletionResult::failure(CompletionStatus::Timeout, e.to_string()))
            }
            Err(e) => {
                return Attempt::Retryable(CompletionResult::failure(CompletionStatus::TransportError, e.to_string()))
            }
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => {
                return Attempt::Retryable(CompletionResult::failure(CompletionStatus::Timeout, e.to_string()))
            }
            Err(e) => {
                return Attempt::Retryable(CompletionResult::failure(CompletionStatus::TransportError, e.to_string()))
            }
        };
        if status.is_success() {
            return Attempt::Done(parse_completion_body(&text));
        }
        let failure = CompletionResult::failure(
            CompletionStatus::ApiError,
            format!("HTTP {}: {}", status.as_u16(), provider_detail(&text)),
        );
        if status.as_u16() == 429 || status.is_server_error() {
            Attempt::Retryable(failure)
        } else {
            Attempt::Done(failure)
        }
    }
}

fn parse_completion_body(text: &str) -> CompletionResult {
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            return CompletionResult::failure(CompletionStatus::ApiError, format!("malformed response body: {e}"))
        }
    };
    match value.pointer("/choices/0/text").and_then(Value::as_str) {
        Some(t) => CompletionResult::ok(t),
        None => CompletionResult::failure(CompletionStatus::ApiError, "response has no choices[0].text"),
    }
}

fn provider_detail(body: &str) -> String {
    let parsed: Option<Value> = serde_json::from_str(body).ok();
    let error = parsed.as_ref().and_then(|v| v.get("error"));
    match error {
        Some(Value::Object(obj)) => {
            let message = obj.get("message").and_then(Value::as_str).unwrap_or("");
            let code = obj.get("code").or_else(|| obj.get("type")).and_then(Value::as_str);
            match code {
                Some(code) => format!("{message} ({code})"),
                None => message.to_string(),
            }
        }
        Some(Value::String(s)) => s.clone(),
        _ => body.chars().take(300).collect(),
    }
}

impl CompletionBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResult {
        if let Err(e) = request.check() {
            return CompletionResult::failure(CompletionStatus::ApiError, format!("invalid request: {e}"));
        }
        let Some(key) = self.api_key.as_deref() else {
            return CompletionResult::failure(
                CompletionStatus::ApiError,
                format!("missing API key: environment variable {} is not set", self.config.api_key_env_name),
            );
        };
        let client = match self.client() {
            Ok(c) => c,
            Err(failure) => return failure,
        };
        let body = request_body(request).to_string();
        let attempts = self.config.max_retries + 1;
        let mut delay = self.config.retry_backoff;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.attempt(&client, key, &body) {
                Attempt::Done(result) => return result,
                Attempt::Retryable(result) => {
                    last = Some(result);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay = delay.saturating_mul(2);
                    }
                }
            }
        }
        let mut result = last.expect("at least one attempt");
        result.detail = format!("{} (after {attempts} attempts)", result.detail);
        result
    }

    fn health_check(&self) -> CompletionResult {
        let mut params = default_generation_params();
        params.model_id = self.health_model.clone();
        params.max_tokens = 1;
        let result = self.complete(&CompletionRequest::new("Hello", params));
        if result.is_ok() {
            CompletionResult::ok("")
        } else {
            result
        }
    }
}
