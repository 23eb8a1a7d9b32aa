//! Turns raw completion text into an utterance plus four cue IDs.
//!
//! Expected layout is the utterance followed by cue lines such as
//! `Speech: Medium-paced speech in neutral tones (opt. 6)`. Headers are
//! matched case-insensitively, may come in any order, and may also run
//! inline on one line. A parenthesized `(opt. N)` is authoritative when in
//! range; the label is still resolved and any disagreement is recorded as a
//! [`DiagnosticCode::LabelIdConflict`] warning.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{lookup_option, CueAssignment, CueCategory, LabelMatcher, MatchQuality, TaxonomyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCode {
    LabelIdConflict,
    DuplicateCue,
    IdOutOfRange,
    UnrecognizedLabel,
    FuzzyLabel,
    ParseFailure,
    FallbackUsed,
    HistoryTruncated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub severity: Severity,
    pub code: DiagnosticCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<CueCategory>,
    pub message: String,
    /// Option the free-text label resolved to (label/ID conflicts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_reading: Option<u32>,
    /// Option named by the numeric ID (label/ID conflicts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_reading: Option<u32>,
}

impl ParseDiagnostic {
    pub fn new(
        severity: Severity,
        code: DiagnosticCode,
        category: Option<CueCategory>,
        message: impl Into<String>,
    ) -> Self {
        Self { severity, code, category, message: message.into(), label_reading: None, id_reading: None }
    }

    fn conflict(category: CueCategory, label: &str, label_id: u32, stated_id: u32) -> Self {
        let label_canon = lookup_option(category, label_id).map(|o| o.label).unwrap_or("?");
        let stated_canon = lookup_option(category, stated_id).map(|o| o.label).unwrap_or("?");
        Self {
            severity: Severity::Warning,
            code: DiagnosticCode::LabelIdConflict,
            category: Some(category),
            message: format!(
                "{category}: label {label:?} reads as option {label_id} ({label_canon}) but the ID says option {stated_id} ({stated_canon}); using {stated_id}"
            ),
            label_reading: Some(label_id),
            id_reading: Some(stated_id),
        }
    }
}

/// An utterance with its validated cue assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedUtterance {
    pub text: String,
    pub cues: CueAssignment,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl AnnotatedUtterance {
    pub fn new(text: impl Into<String>, cues: CueAssignment) -> Self {
        Self { text: text.into(), cues, diagnostics: Vec::new() }
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ParseDiagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Warning)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no {category} cue could be recovered: {detail}")]
    MissingCue { category: CueCategory, detail: String },
    #[error("no utterance text precedes the cue lines")]
    EmptyUtterance,
}

static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)(?:^|[^\p{L}\p{N}])(speech(?:[ \t]+tone)?|action|facial[ \t]+expression|face|emotion)[ \t]*\**[ \t]*:",
    )
    .expect("header pattern")
});

static OPTION_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\(\s*opt(?:ion)?\s*\.?\s*#?\s*(\d+)\s*\)").expect("option pattern"));

static LEADING_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)\s*[:.)]\s+").expect("leading id pattern"));

static DEFAULT_PARSER: LazyLock<ResponseParser> = LazyLock::new(ResponseParser::default);

fn header_category(name: &str) -> CueCategory {
    let lower = name.to_ascii_lowercase();
    if lower.starts_with("speech") {
        CueCategory::Speech
    } else if lower.starts_with("action") {
        CueCategory::Action
    } else if lower.starts_with("emotion") {
        CueCategory::Emotion
    } else {
        CueCategory::Face
    }
}

struct CueLine<'a> {
    category: CueCategory,
    value: &'a str,
}

/// Byte offset where the utterance ends, plus every cue segment found.
fn scan(raw: &str) -> (usize, Vec<CueLine<'_>>) {
    let headers: Vec<(usize, usize, CueCategory)> = HEADER
        .captures_iter(raw)
        .map(|c| {
            let name = c.get(1).expect("group 1");
            let whole = c.get(0).expect("group 0");
            (name.start(), whole.end(), header_category(name.as_str()))
        })
        .collect();
    let utterance_end = headers.first().map_or(raw.len(), |h| h.0);
    let lines = headers
        .iter()
        .enumerate()
        .map(|(i, &(_, value_start, category))| {
            let next_header = headers.get(i + 1).map_or(raw.len(), |h| h.0);
            let line_end = raw[value_start..].find('\n').map_or(raw.len(), |p| value_start + p);
            CueLine { category, value: &raw[value_start..next_header.min(line_end)] }
        })
        .collect();
    (utterance_end, lines)
}

fn clean_utterance(text: &str) -> &str {
    let t = text.trim();
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}'), ('\'', '\'')] {
        if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
            return t[open.len_utf8()..t.len() - close.len_utf8()].trim();
        }
    }
    t
}

fn clean_label(text: &str) -> &str {
    text.trim()
        .trim_matches(|c: char| c == '*' || c == '_' || c == '`' || c == '"' || c == '\'' || c.is_whitespace())
        .trim_end_matches(['.', ',', ';'])
        .trim()
}

/// Outcome of resolving a single cue line.
struct Resolved {
    id: u32,
    diagnostics: Vec<ParseDiagnostic>,
}

#[derive(Debug, Clone, Default)]
pub struct ResponseParser {
    matcher: LabelMatcher,
}

impl ResponseParser {
    pub fn new(matcher: LabelMatcher) -> Self {
        Self { matcher }
    }

    pub fn matcher(&self) -> &LabelMatcher {
        &self.matcher
    }

    pub fn parse(&self, raw: &str) -> Result<AnnotatedUtterance, ParseError> {
        let (utterance_end, lines) = scan(raw);
        let text = clean_utterance(&raw[..utterance_end]);
        if text.is_empty() {
            return Err(ParseError::EmptyUtterance);
        }

        let mut resolved: [Option<u32>; 4] = [None; 4];
        let mut failures: [Option<String>; 4] = Default::default();
        let mut diagnostics = Vec::new();
        for line in &lines {
            let slot = line.category as usize;
            if resolved[slot].is_some() {
                diagnostics.push(ParseDiagnostic::new(
                    Severity::Warning,
                    DiagnosticCode::DuplicateCue,
                    Some(line.category),
                    format!("{}: duplicate cue line {:?} ignored", line.category, line.value.trim()),
                ));
                continue;
            }
            match self.resolve(line.category, line.value) {
                Ok(r) => {
                    resolved[slot] = Some(r.id);
                    diagnostics.extend(r.diagnostics);
                }
                Err(detail) => {
                    failures[slot].get_or_insert(detail);
                }
            }
        }

        let mut cues = CueAssignment::new(0, 0, 0, 0);
        for category in CueCategory::ALL {
            let slot = category as usize;
            match resolved[slot] {
                Some(id) => cues.set(category, id),
                None => {
                    let detail = failures[slot].take().unwrap_or_else(|| "no cue line".to_string());
                    return Err(ParseError::MissingCue { category, detail });
                }
            }
        }
        debug_assert!(cues.validate().is_ok());
        Ok(AnnotatedUtterance { text: text.to_string(), cues, diagnostics })
    }

    fn resolve(&self, category: CueCategory, value: &str) -> Result<Resolved, String> {
        let mut diagnostics = Vec::new();
        let (stated, label) = match OPTION_ID.captures(value) {
            Some(c) => {
                let whole = c.get(0).expect("group 0");
                let label = format!("{} {}", &value[..whole.start()], &value[whole.end()..]);
                (c[1].parse::<u32>().ok(), label)
            }
            None => match LEADING_ID.captures(value.trim()) {
                Some(c) => {
                    let trimmed = value.trim();
                    (c[1].parse::<u32>().ok(), trimmed[c.get(0).expect("group 0").end()..].to_string())
                }
                None => (None, value.to_string()),
            },
        };
        let label = clean_label(&label);

        let stated = match stated {
            Some(id) if lookup_option(category, id).is_ok() => Some(id),
            Some(id) => {
                diagnostics.push(ParseDiagnostic::new(
                    Severity::Warning,
                    DiagnosticCode::IdOutOfRange,
                    Some(category),
                    format!(
                        "{category}: option {id} is out of range (1..={}); falling back to the label",
                        category.size()
                    ),
                ));
                None
            }
            None => None,
        };

        let by_label = if label.is_empty() { None } else { Some(self.matcher.match_label(category, label)) };

        match (stated, by_label) {
            (Some(id), None) => Ok(Resolved { id, diagnostics }),
            (Some(id), Some(Ok(m))) => {
                if m.option.id != id {
                    diagnostics.push(ParseDiagnostic::conflict(category, label, m.option.id, id));
                }
                Ok(Resolved { id, diagnostics })
            }
            (Some(id), Some(Err(_))) => {
                diagnostics.push(ParseDiagnostic::new(
                    Severity::Info,
                    DiagnosticCode::UnrecognizedLabel,
                    Some(category),
                    format!("{category}: label {label:?} not recognized; using option {id}"),
                ));
                Ok(Resolved { id, diagnostics })
            }
            (None, Some(Ok(m))) => {
                if m.quality == MatchQuality::Fuzzy {
                    diagnostics.push(ParseDiagnostic::new(
                        Severity::Info,
                        DiagnosticCode::FuzzyLabel,
                        Some(category),
                        format!(
                            "{category}: label {label:?} approximately matched option {} ({})",
                            m.option.id, m.option.label
                        ),
                    ));
                }
                Ok(Resolved { id: m.option.id, diagnostics })
            }
            (None, Some(Err(e))) => Err(match e {
                TaxonomyError::NoMatch { text, .. } => format!("label {text:?} matches no option"),
                other => other.to_string(),
            }),
            (None, None) => Err("cue line has neither label nor option ID".to_string()),
        }
    }

    /// Text before the first recognized cue header, or the whole input.
    pub fn extract_utterance_only(&self, raw: &str) -> Result<String, ParseError> {
        extract_utterance_only(raw)
    }
}

pub fn parse_response(raw: &str) -> Result<AnnotatedUtterance, ParseError> {
    DEFAULT_PARSER.parse(raw)
}

pub fn extract_utterance_only(raw: &str) -> Result<String, ParseError> {
    let (end, _) = scan(raw);
    let text = clean_utterance(&raw[..end]);
    if text.is_empty() {
        Err(ParseError::EmptyUtterance)
    } else {
        Ok(text.to_string())
    }
}

/// One canonical cue line, e.g. `Speech: High and fast speech (opt. 1)`.
pub fn cue_line(category: CueCategory, id: u32) -> String {
    let option = lookup_option(category, id).expect("valid option id");
    format!("{}: {} (opt. {})", category.header(), option.label, option.id)
}

/// Utterance followed by the four cue lines in SAFE order, canonical labels.
pub fn serialize_annotated(u: &AnnotatedUtterance) -> String {
    let mut out = u.text.trim().to_string();
    for category in CueCategory::ALL {
        out.push('\n');
        out.push_str(&cue_line(category, u.cues.get(category)));
    }
    out
}
