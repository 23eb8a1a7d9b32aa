//! The counseling loop: client message in, annotated robot turn out.
//!
//! Each [`Session::step`] renders the prompt from the full history, calls
//! the backend, parses the completion (re-issuing the same prompt when the
//! output cannot be parsed) and falls back to a fixed cue assignment when
//! every attempt fails. Both turns of a step are committed together, to
//! memory and, when a transcript path is attached, to disk.
//!
//! Transcripts are JSONL: a header line followed by one line per turn.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, TryLockError};

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CompletionBackend, CompletionRequest, CompletionStatus};
use crate::parser::{
    serialize_annotated, AnnotatedUtterance, DiagnosticCode, ParseDiagnostic, ResponseParser, Severity,
};
use crate::prompt::{
    build_prompt_within_budget, DialogueHistory, GenerationParams, PromptError, PromptTemplate, Speaker,
    DEFAULT_CONTEXT_LIMIT,
};
use crate::taxonomy::CueAssignment;

/// Cues used when no completion could be parsed: medium-paced neutral
/// speech, eye contact, no expression, calm.
pub const FALLBACK_CUES: CueAssignment = CueAssignment::new(6, 7, 4, 7);
pub const FALLBACK_UTTERANCE: &str = "I'm sorry, could you tell me a little more about that?";
pub const DEFAULT_PARSE_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("client message is empty")]
    EmptyMessage,
    #[error("backend unavailable ({status:?}): {detail}")]
    BackendUnavailable { status: CompletionStatus, detail: String },
    #[error("session is busy with another message")]
    Busy,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed transcript at line {line}: {message}")]
    MalformedTranscript { line: usize, message: String },
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: the n-th call returns `start + n * step`.
#[derive(Debug)]
pub struct SteppingClock {
    start: DateTime<Utc>,
    step: Duration,
    ticks: AtomicU64,
}

impl SteppingClock {
    pub fn new(start: DateTime<Utc>, step: Duration) -> Self {
        Self { start, step, ticks: AtomicU64::new(0) }
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let n = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.start + self.step * n as i32
    }
}

pub trait IdSource: Send + Sync {
    fn next_id(&self) -> String;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UuidIds;

impl IdSource for UuidIds {
    fn next_id(&self) -> String {
        uuid::Uuid::new_v4().to_string()
    }
}

/// `prefix-1`, `prefix-2`, ... for reproducible tests.
#[derive(Debug)]
pub struct SequentialIds {
    prefix: String,
    next: AtomicU64,
}

impl SequentialIds {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into(), next: AtomicU64::new(1) }
    }
}

impl IdSource for SequentialIds {
    fn next_id(&self) -> String {
        format!("{}-{}", self.prefix, self.next.fetch_add(1, Ordering::SeqCst))
    }
}

mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s).map(|t| t.with_timezone(&Utc)).map_err(serde::de::Error::custom)
    }
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Client,
    Robot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cues: Option<CueAssignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default)]
    pub diagnostics: Vec<ParseDiagnostic>,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
}

impl Turn {
    pub fn fallback_used(&self) -> bool {
        self.diagnostics.iter().any(|d| d.code == DiagnosticCode::FallbackUsed)
    }

    /// The robot turn as an annotated utterance, if it carries cues.
    pub fn annotated(&self) -> Option<AnnotatedUtterance> {
        self.cues.map(|cues| AnnotatedUtterance {
            text: self.text.clone(),
            cues,
            diagnostics: self.diagnostics.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub session_id: String,
    #[serde(with = "rfc3339")]
    pub created_at: DateTime<Utc>,
    pub params: GenerationParams,
    pub template_name: String,
}

/// Everything a session persists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    #[serde(flatten)]
    pub header: TranscriptHeader,
    pub turns: Vec<Turn>,
}

impl Transcript {
    pub fn header_line(&self) -> String {
        serde_json::to_string(&self.header).expect("header serializes")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for turn in &self.turns {
            out.push_str(&turn_line(turn));
        }
        out
    }

    pub fn from_jsonl(doc: &str) -> Result<Self, SessionError> {
        let mut lines = doc.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (n, first) = lines
            .next()
            .ok_or_else(|| SessionError::MalformedTranscript { line: 1, message: "missing header line".into() })?;
        let header: TranscriptHeader = serde_json::from_str(first)
            .map_err(|e| SessionError::MalformedTranscript { line: n + 1, message: format!("bad header: {e}") })?;
        let mut turns: Vec<Turn> = Vec::new();
        for (n, line) in lines {
            let malformed = |message: String| SessionError::MalformedTranscript { line: n + 1, message };
            let turn: Turn = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if turn.index != turns.len() {
                return Err(malformed(format!("expected turn index {}, found {}", turns.len(), turn.index)));
            }
            let expected = if turn.index.is_multiple_of(2) { Role::Client } else { Role::Robot };
            if turn.speaker != expected {
                return Err(malformed(format!("turn {} should be spoken by {expected:?}", turn.index)));
            }
            match (turn.speaker, turn.cues) {
                (Role::Client, Some(_)) => return Err(malformed("client turns carry no cues".into())),
                (Role::Robot, Some(cues)) => {
                    cues.validate().map_err(|e| malformed(e.to_string()))?;
                }
                (Role::Robot, None) if !turn.fallback_used() => {
                    return Err(malformed("robot turn has no cues".into()));
                }
                _ => {}
            }
            turns.push(turn);
        }
        Ok(Self { header, turns })
    }

    fn history(&self) -> DialogueHistory {
        let mut history = DialogueHistory::new();
        for turn in &self.turns {
            match turn.speaker {
                Role::Client => history.push(Speaker::Human, turn.text.clone()),
                Role::Robot => match turn.annotated() {
                    Some(u) => history.push(Speaker::Ai, serialize_annotated(&u)),
                    None => history.push(Speaker::Ai, turn.text.clone()),
                },
            }
        }
        history
    }
}

fn turn_line(turn: &Turn) -> String {
    let mut line = serde_json::to_string(turn).expect("turn serializes");
    line.push('\n');
    line
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io { path: path.display().to_string(), source }
}

pub fn save_transcript(transcript: &Transcript, path: &Path) -> Result<(), SessionError> {
    std::fs::write(path, transcript.to_jsonl()).map_err(io_error(path))
}

pub fn load_transcript(path: &Path) -> Result<Transcript, SessionError> {
    let doc = std::fs::read_to_string(path).map_err(io_error(path))?;
    Transcript::from_jsonl(&doc)
}

pub struct SessionConfig {
    pub template: PromptTemplate,
    pub params: GenerationParams,
    pub backend: Arc<dyn CompletionBackend>,
    pub parser: ResponseParser,
    pub clock: Arc<dyn Clock>,
    pub ids: Arc<dyn IdSource>,
    /// Fail `start_session` if the backend health check does not pass.
    pub require_healthy: bool,
    pub context_limit: usize,
    pub parse_retries: u32,
    /// When set, the transcript is written here and each step is appended.
    pub transcript_path: Option<PathBuf>,
}

impl SessionConfig {
    pub fn new(template: PromptTemplate, params: GenerationParams, backend: Arc<dyn CompletionBackend>) -> Self {
        Self {
            template,
            params,
            backend,
            parser: ResponseParser::default(),
            clock: Arc::new(SystemClock),
            ids: Arc::new(UuidIds),
            require_healthy: true,
            context_limit: DEFAULT_CONTEXT_LIMIT,
            parse_retries: DEFAULT_PARSE_RETRIES,
            transcript_path: None,
        }
    }
}

pub struct Session {
    transcript: Transcript,
    template: PromptTemplate,
    backend: Arc<dyn CompletionBackend>,
    parser: ResponseParser,
    clock: Arc<dyn Clock>,
    context_limit: usize,
    parse_retries: u32,
    transcript_path: Option<PathBuf>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.transcript.header.session_id)
            .field("turns", &self.transcript.turns.len())
            .field("backend", &self.backend.name())
            .finish()
    }
}

pub fn start_session(config: SessionConfig) -> Result<Session, SessionError> {
    config.params.validate()?;
    if config.require_healthy {
        let health = config.backend.health_check();
        if !health.is_ok() {
            return Err(SessionError::BackendUnavailable { status: health.status, detail: health.detail });
        }
    }
    let header = TranscriptHeader {
        session_id: config.ids.next_id(),
        created_at: config.clock.now(),
        params: config.params.clone(),
        template_name: config.template.name.clone(),
    };
    let transcript = Transcript { header, turns: Vec::new() };
    if let Some(path) = &config.transcript_path {
        save_transcript(&transcript, path)?;
    }
    Ok(Session::assemble(transcript, config))
}

impl Session {
    fn assemble(transcript: Transcript, config: SessionConfig) -> Self {
        Self {
            transcript,
            template: config.template,
            backend: config.backend,
            parser: config.parser,
            clock: config.clock,
            context_limit: config.context_limit,
            parse_retries: config.parse_retries,
            transcript_path: config.transcript_path,
        }
    }

    /// Continues a loaded transcript. The config's params are ignored in
    /// favour of the transcript's own.
    pub fn resume(transcript: Transcript, config: SessionConfig) -> Result<Self, SessionError> {
        if let Some(path) = &config.transcript_path {
            save_transcript(&transcript, path)?;
        }
        Ok(Self::assemble(transcript, config))
    }

    pub fn id(&self) -> &str {
        &self.transcript.header.session_id
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn turns(&self) -> &[Turn] {
        &self.transcript.turns
    }

    pub fn params(&self) -> &GenerationParams {
        &self.transcript.header.params
    }

    pub fn save(&self, path: &Path) -> Result<(), SessionError> {
        save_transcript(&self.transcript, path)
    }

    pub fn step(&mut self, client_message: &str) -> Result<(Turn, Turn), SessionError> {
        let message = client_message.trim();
        if message.is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        let client_time = self.clock.now();
        let built = build_prompt_within_budget(
            &self.template,
            &self.transcript.history(),
            message,
            self.params(),
            self.context_limit,
        )?;
        let request = CompletionRequest::new(built.text, self.params().clone());

        let mut diagnostics = Vec::new();
        if built.dropped_turns > 0 {
            diagnostics.push(ParseDiagnostic::new(
                Severity::Info,
                DiagnosticCode::HistoryTruncated,
                None,
                format!("{} oldest history turns omitted to fit the context limit", built.dropped_turns),
            ));
        }

        let attempts = 1 + self.parse_retries;
        let mut last_raw = String::new();
        let mut parsed = None;
        for attempt in 1..=attempts {
            let result = self.backend.complete(&request);
            if !result.is_ok() {
                return Err(SessionError::BackendUnavailable { status: result.status, detail: result.detail });
            }
            last_raw = result.text;
            match self.parser.parse(&last_raw) {
                Ok(u) => {
                    parsed = Some(u);
                    break;
                }
                Err(e) => diagnostics.push(ParseDiagnostic::new(
                    Severity::Warning,
                    DiagnosticCode::ParseFailure,
                    None,
                    format!("attempt {attempt}/{attempts}: {e}"),
                )),
            }
        }

        let (text, cues) = match parsed {
            Some(u) => {
                diagnostics.extend(u.diagnostics);
                (u.text, u.cues)
            }
            None => {
                let text =
                    self.parser.extract_utterance_only(&last_raw).unwrap_or_else(|_| FALLBACK_UTTERANCE.to_string());
                diagnostics.push(ParseDiagnostic::new(
                    Severity::Warning,
                    DiagnosticCode::FallbackUsed,
                    None,
                    format!(
                        "fallback_used: no parseable completion after {attempts} attempts; cues set to {FALLBACK_CUES}"
                    ),
                ));
                (text, FALLBACK_CUES)
            }
        };

        let next = self.transcript.turns.len();
        let client = Turn {
            index: next,
            speaker: Role::Client,
            text: message.to_string(),
            cues: None,
            raw: None,
            diagnostics: Vec::new(),
            timestamp: client_time,
        };
        let robot = Turn {
            index: next + 1,
            speaker: Role::Robot,
            text,
            cues: Some(cues),
            raw: Some(last_raw),
            diagnostics,
            timestamp: self.clock.now(),
        };

        if let Some(path) = &self.transcript_path {
            let mut lines = turn_line(&client);
            lines.push_str(&turn_line(&robot));
            let mut file = OpenOptions::new().append(true).open(path).map_err(io_error(path))?;
            file.write_all(lines.as_bytes()).map_err(io_error(path))?;
            file.flush().map_err(io_error(path))?;
        }
        self.transcript.turns.push(client.clone());
        self.transcript.turns.push(robot.clone());
        Ok((client, robot))
    }
}

/// A session shared between threads. At most one step runs at a time;
/// a second concurrent caller gets [`SessionError::Busy`].
#[derive(Debug, Clone)]
pub struct SharedSession {
    inner: Arc<Mutex<Session>>,
}

impl SharedSession {
    pub fn new(session: Session) -> Self {
        Self { inner: Arc::new(Mutex::new(session)) }
    }

    pub fn try_step(&self, client_message: &str) -> Result<(Turn, Turn), SessionError> {
        let mut guard = match self.inner.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(SessionError::Busy),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        guard.step(client_message)
    }

    /// Snapshot of the transcript; waits for an in-flight step to finish.
    pub fn transcript(&self) -> Transcript {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).transcript().clone()
    }

    pub fn id(&self) -> String {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).id().to_string()
    }
}
