//! The fixed SAFE cue vocabulary: Speech tone, Action (gesture), Facial
//! expression and Emotion, each with a closed set of numbered options.
//!
//! Labels are stored exactly as they appear in the published cue table,
//! capitalization quirks included ("Light Smile", "Shake head", "Eye Contact").
//! Every other module resolves IDs and labels through here.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

const SPEECH: [&str; 7] = [
    "High and fast speech",
    "High and medium pace speech",
    "Low and slow speech",
    "Low and moderately fast speech",
    "Fast speech in neutral tones",
    "Medium-paced speech in neutral tones",
    "Slow speech in neutral tones",
];

const ACTION: [&str; 7] = [
    "Turn your head towards the speaker",
    "Shake head",
    "Put your hands on your shoulders",
    "Raise one hand diagonally upward",
    "Nod",
    "Interlock hands and place them on the table",
    "Eye Contact",
];

const FACE: [&str; 10] = [
    "Frown",
    "Light Smile",
    "Pout",
    "No expression",
    "Bright Smile",
    "Raise eyebrows",
    "Grin",
    "Lower the tips of your eyebrows",
    "Jaw drop",
    "Widened Eyes",
];

const EMOTION: [&str; 10] =
    ["Joy", "Lively", "Sad", "Surprised", "Angry", "Worry", "Calm", "Indifferent", "No emotion", "Disgust"];

/// One of the four SAFE cue categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueCategory {
    Speech,
    Action,
    Face,
    Emotion,
}

impl CueCategory {
    /// Canonical presentation order.
    pub const ALL: [CueCategory; 4] = [Self::Speech, Self::Action, Self::Face, Self::Emotion];

    /// Number of options in this category.
    pub fn size(self) -> u32 {
        self.labels().len() as u32
    }

    /// Lowercase key used in JSON documents and CSV rows.
    pub fn key(self) -> &'static str {
        match self {
            Self::Speech => "speech",
            Self::Action => "action",
            Self::Face => "face",
            Self::Emotion => "emotion",
        }
    }

    /// Header used on cue lines in model output and canonical rendering.
    pub fn header(self) -> &'static str {
        match self {
            Self::Speech => "Speech",
            Self::Action => "Action",
            Self::Face => "Facial expression",
            Self::Emotion => "Emotion",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.key().eq_ignore_ascii_case(key.trim()))
    }

    fn labels(self) -> &'static [&'static str] {
        match self {
            Self::Speech => &SPEECH,
            Self::Action => &ACTION,
            Self::Face => &FACE,
            Self::Emotion => &EMOTION,
        }
    }
}

impl fmt::Display for CueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.header())
    }
}

/// A single numbered option within a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CueOption {
    pub category: CueCategory,
    pub id: u32,
    pub label: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("{category} option {id} is out of range (valid: 1..={max})", max = category.size())]
    OutOfRange { category: CueCategory, id: u32 },
    #[error("no {category} option matches {text:?}")]
    NoMatch { category: CueCategory, text: String },
    #[error("cue label is empty")]
    EmptyInput,
    #[error("invalid synonym table: {0}")]
    InvalidSynonyms(String),
}

/// The immutable SAFE vocabulary.
#[derive(Debug)]
pub struct CueTaxonomy {
    _private: (),
}

static TAXONOMY: CueTaxonomy = CueTaxonomy { _private: () };

/// Returns the process-wide taxonomy.
pub fn canonical_taxonomy() -> &'static CueTaxonomy {
    &TAXONOMY
}

impl CueTaxonomy {
    pub fn categories(&self) -> [CueCategory; 4] {
        CueCategory::ALL
    }

    pub fn options(&self, category: CueCategory) -> impl Iterator<Item = CueOption> {
        category.labels().iter().enumerate().map(move |(i, label)| CueOption { category, id: i as u32 + 1, label })
    }

    pub fn option_count(&self, category: CueCategory) -> u32 {
        category.size()
    }

    pub fn total_options(&self) -> u32 {
        CueCategory::ALL.iter().map(|c| c.size()).sum()
    }

    pub fn lookup(&self, category: CueCategory, id: u32) -> Result<CueOption, TaxonomyError> {
        lookup_option(category, id)
    }

    /// JSON document served at `GET /api/taxonomy`.
    pub fn to_json(&self) -> Value {
        let mut doc = serde_json::Map::new();
        for category in CueCategory::ALL {
            let opts: Vec<Value> = self.options(category).map(|o| json!({ "id": o.id, "label": o.label })).collect();
            doc.insert(category.key().to_string(), Value::Array(opts));
        }
        Value::Object(doc)
    }
}

pub fn lookup_option(category: CueCategory, id: u32) -> Result<CueOption, TaxonomyError> {
    let labels = category.labels();
    if id == 0 || id as usize > labels.len() {
        return Err(TaxonomyError::OutOfRange { category, id });
    }
    Ok(CueOption { category, id, label: labels[id as usize - 1] })
}

/// How a free-text label was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchQuality {
    /// Byte-equal to the canonical label (ignoring surrounding whitespace).
    Exact,
    /// Equal after normalization, or a configured synonym.
    Normalized,
    /// Nearest label by edit distance, within the fuzzy threshold.
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelMatch {
    pub option: CueOption,
    pub quality: MatchQuality,
}

/// Lowercase, replace punctuation with spaces, collapse whitespace.
pub fn normalize_label(text: &str) -> String {
    let cleaned: String =
        text.chars().map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' }).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fuzzy_threshold(normalized_label: &str) -> usize {
    let len = normalized_label.chars().count();
    std::cmp::max(2, len / 5)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Synonym {
    category: CueCategory,
    normalized: String,
    id: u32,
}

/// Resolves free-text cue mentions to taxonomy options.
///
/// Holds the synonym table; the default table maps "Neutral expression" to
/// Face option 4 ("No expression").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatcher {
    synonyms: Vec<Synonym>,
}

impl Default for LabelMatcher {
    fn default() -> Self {
        let mut matcher = Self::empty();
        matcher.add_synonym(CueCategory::Face, "Neutral expression", 4).expect("built-in synonym is valid");
        matcher
    }
}

impl LabelMatcher {
    /// A matcher with no synonyms at all.
    pub fn empty() -> Self {
        Self { synonyms: Vec::new() }
    }

    pub fn add_synonym(&mut self, category: CueCategory, text: &str, id: u32) -> Result<(), TaxonomyError> {
        lookup_option(category, id)?;
        let normalized = normalize_label(text);
        if normalized.is_empty() {
            return Err(TaxonomyError::EmptyInput);
        }
        self.synonyms.retain(|s| !(s.category == category && s.normalized == normalized));
        self.synonyms.push(Synonym { category, normalized, id });
        Ok(())
    }

    /// Extends the defaults with a JSON table of the form
    /// `{"face": {"Neutral expression": 4}, "action": {"Nodding": 5}}`.
    pub fn from_json_str(doc: &str) -> Result<Self, TaxonomyError> {
        let table: BTreeMap<String, BTreeMap<String, u32>> =
            serde_json::from_str(doc).map_err(|e| TaxonomyError::InvalidSynonyms(e.to_string()))?;
        let mut matcher = Self::default();
        for (key, entries) in table {
            let category = CueCategory::from_key(&key)
                .ok_or_else(|| TaxonomyError::InvalidSynonyms(format!("unknown category {key:?}")))?;
            for (text, id) in entries {
                matcher.add_synonym(category, &text, id)?;
            }
        }
        Ok(matcher)
    }

    pub fn match_label(&self, category: CueCategory, text: &str) -> Result<LabelMatch, TaxonomyError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(TaxonomyError::EmptyInput);
        }
        let taxonomy = canonical_taxonomy();
        if let Some(option) = taxonomy.options(category).find(|o| o.label == trimmed) {
            return Ok(LabelMatch { option, quality: MatchQuality::Exact });
        }

        let needle = normalize_label(trimmed);
        if needle.is_empty() {
            return Err(TaxonomyError::NoMatch { category, text: trimmed.to_string() });
        }
        let candidates: Vec<(String, u32)> = taxonomy
            .options(category)
            .map(|o| (normalize_label(o.label), o.id))
            .chain(self.synonyms.iter().filter(|s| s.category == category).map(|s| (s.normalized.clone(), s.id)))
            .collect();

        if let Some((_, id)) = candidates.iter().find(|(label, _)| *label == needle) {
            let option = lookup_option(category, *id)?;
            return Ok(LabelMatch { option, quality: MatchQuality::Normalized });
        }

        // Nearest within threshold; ties go to the lower option ID.
        let best = candidates
            .iter()
            .filter_map(|(label, id)| {
                let distance = strsim::levenshtein(&needle, label);
                (distance <= fuzzy_threshold(label)).then_some((distance, *id))
            })
            .min();
        match best {
            Some((_, id)) => Ok(LabelMatch { option: lookup_option(category, id)?, quality: MatchQuality::Fuzzy }),
            None => Err(TaxonomyError::NoMatch { category, text: trimmed.to_string() }),
        }
    }
}

/// Resolves `text` with the default synonym table.
pub fn match_label(category: CueCategory, text: &str) -> Result<LabelMatch, TaxonomyError> {
    LabelMatcher::default().match_label(category, text)
}

/// One chosen option ID per SAFE category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CueAssignment {
    pub speech: u32,
    pub action: u32,
    pub face: u32,
    pub emotion: u32,
}

impl CueAssignment {
    pub const fn new(speech: u32, action: u32, face: u32, emotion: u32) -> Self {
        Self { speech, action, face, emotion }
    }

    pub fn get(&self, category: CueCategory) -> u32 {
        match category {
            CueCategory::Speech => self.speech,
            CueCategory::Action => self.action,
            CueCategory::Face => self.face,
            CueCategory::Emotion => self.emotion,
        }
    }

    pub fn set(&mut self, category: CueCategory, id: u32) {
        match category {
            CueCategory::Speech => self.speech = id,
            CueCategory::Action => self.action = id,
            CueCategory::Face => self.face = id,
            CueCategory::Emotion => self.emotion = id,
        }
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.speech, self.action, self.face, self.emotion]
    }

    /// Canonical option for `category`. Panics if the assignment is invalid.
    pub fn option(&self, category: CueCategory) -> CueOption {
        lookup_option(category, self.get(category)).expect("assignment must be validated first")
    }

    pub fn validate(&self) -> Result<(), InvalidAssignment> {
        validate_assignment(self)
    }

    /// Every valid assignment, in lexicographic SAFE order.
    pub fn all_valid() -> impl Iterator<Item = CueAssignment> {
        let s = CueCategory::Speech.size();
        let a = CueCategory::Action.size();
        let f = CueCategory::Face.size();
        let e = CueCategory::Emotion.size();
        (1..=s).flat_map(move |speech| {
            (1..=a).flat_map(move |action| {
                (1..=f)
                    .flat_map(move |face| (1..=e).map(move |emotion| CueAssignment::new(speech, action, face, emotion)))
            })
        })
    }
}

impl fmt::Display for CueAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.speech, self.action, self.face, self.emotion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid cue assignment: {}", describe(.offenders))]
pub struct InvalidAssignment {
    pub offenders: Vec<(CueCategory, u32)>,
}

fn describe(offenders: &[(CueCategory, u32)]) -> String {
    offenders.iter().map(|(c, id)| format!("{} {} not in 1..={}", c.key(), id, c.size())).collect::<Vec<_>>().join(", ")
}

/// Checks every ID against its category range, listing all offenders.
pub fn validate_assignment(assignment: &CueAssignment) -> Result<(), InvalidAssignment> {
    let offenders: Vec<_> = CueCategory::ALL
        .into_iter()
        .map(|c| (c, assignment.get(c)))
        .filter(|&(c, id)| lookup_option(c, id).is_err())
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(InvalidAssignment { offenders })
    }
}
