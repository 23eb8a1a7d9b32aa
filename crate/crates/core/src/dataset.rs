//! Ground-truth dataset files: JSONL, one question-answer pair per line.
//!
//! ```text
//! {"id": "p1", "client_message": "...", "human": {"text": "...", "speech": 1, "action": 7, "face": 1, "emotion": 6}, "robot": {...}}
//! ```
//!
//! `robot` is optional. The same format is used for offline datasets and for
//! annotations appended by the service.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::AnnotatedUtterance;
use crate::taxonomy::CueAssignment;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthPair {
    pub id: String,
    pub client_message: String,
    pub human: AnnotatedUtterance,
    pub robot: Option<AnnotatedUtterance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub text: String,
    #[serde(flatten)]
    pub cues: CueAssignment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub client_message: String,
    pub human: UtteranceRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot: Option<UtteranceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{} invalid dataset line(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<LineError>),
    #[error("invalid pair: {0}")]
    InvalidPair(String),
}

impl From<&AnnotatedUtterance> for UtteranceRecord {
    fn from(u: &AnnotatedUtterance) -> Self {
        Self { text: u.text.clone(), cues: u.cues }
    }
}

impl From<UtteranceRecord> for AnnotatedUtterance {
    fn from(r: UtteranceRecord) -> Self {
        AnnotatedUtterance::new(r.text, r.cues)
    }
}

impl From<&GroundTruthPair> for PairRecord {
    fn from(p: &GroundTruthPair) -> Self {
        Self {
            id: p.id.clone(),
            client_message: p.client_message.clone(),
            human: (&p.human).into(),
            robot: p.robot.as_ref().map(Into::into),
        }
    }
}

impl PairRecord {
    /// Validates and converts to a pair.
    pub fn into_pair(self) -> Result<GroundTruthPair, String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.client_message.trim().is_empty() {
            return Err("client_message is empty".into());
        }
        check_side("human", &self.human)?;
        if let Some(robot) = &self.robot {
            check_side("robot", robot)?;
        }
        Ok(GroundTruthPair {
            id: self.id,
            client_message: self.client_message,
            human: self.human.into(),
            robot: self.robot.map(Into::into),
        })
    }
}

fn check_side(side: &str, r: &UtteranceRecord) -> Result<(), String> {
    if r.text.trim().is_empty() {
        return Err(format!("{side}.text is empty"));
    }
    r.cues.validate().map_err(|e| format!("{side}: {e}"))
}

impl GroundTruthPair {
    pub fn to_line(&self) -> String {
        serde_json::to_string(&PairRecord::from(self)).expect("pair serializes")
    }
}

/// Parses a dataset document, collecting every bad line rather than
/// stopping at the first.
pub fn parse_dataset(doc: &str) -> Result<Vec<GroundTruthPair>, DatasetError> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in doc.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed =
            serde_json::from_str::<PairRecord>(line).map_err(|e| e.to_string()).and_then(PairRecord::into_pair);
        match parsed {
            Ok(p) => pairs.push(p),
            Err(message) => errors.push(LineError { line: n + 1, message }),
        }
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(DatasetError::Invalid(errors))
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<GroundTruthPair>, DatasetError> {
    match std::fs::read_to_string(path) {
        Ok(doc) => parse_dataset(&doc),
        Err(source) => Err(DatasetError::Io { path: path.display().to_string(), source }),
    }
}

/// Like [`load_dataset`], but a missing file is an empty dataset.
pub fn load_dataset_or_empty(path: &Path) -> Result<Vec<GroundTruthPair>, DatasetError> {
    if path.exists() {
        load_dataset(path)
    } else {
        Ok(Vec::new())
    }
}

/// Appends one pair as a single line. Not synchronized; callers serialize
/// concurrent appends.
pub fn append_pair(path: &Path, pair: &GroundTruthPair) -> Result<(), DatasetError> {
    PairRecord::from(pair).into_pair().map_err(DatasetError::InvalidPair)?;
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut line = pair.to_line();
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io)
}

pub fn write_dataset(path: &Path, pairs: &[GroundTruthPair]) -> Result<(), DatasetError> {
    let mut doc = String::new();
    for p in pairs {
        doc.push_str(&p.to_line());
        doc.push('\n');
    }
    std::fs::write(path, doc).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}
