//! Completion prompt assembly.
//!
//! A prompt is the template's instructions, output format and worked example,
//! followed by the dialogue so far and the new client message, ending with
//! `AI:` so the completion continues as the counselor.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{canonical_taxonomy, CueCategory};

const DEFAULT_TEMPLATE: &str = include_str!("../assets/default_template.txt");
const CUE_MENU_PLACEHOLDER: &str = "{{cue_menu}}";

pub const HUMAN_PREFIX: &str = "Human:";
pub const AI_PREFIX: &str = "AI:";
pub const DEFAULT_CONTEXT_LIMIT: usize = 4096;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("client message is empty")]
    EmptyMessage,
    #[error("template is missing the `## {0}` section")]
    MissingSection(&'static str),
    #[error("template section `## {0}` appears more than once")]
    DuplicateSection(&'static str),
    #[error("template line {line}: text before the first section header")]
    StrayText { line: usize },
    #[error(
        "template format section must name the cue lines Speech:, Action:, Facial expression:, Emotion: in that order"
    )]
    IncompleteFormat,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Sampling parameters sent with every completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        default_generation_params()
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), PromptError> {
        let fail = |msg: String| Err(PromptError::InvalidParams(msg));
        if self.model_id.trim().is_empty() {
            return fail("model_id is empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return fail(format!("temperature {} not in [0, 2]", self.temperature));
        }
        if self.max_tokens < 1 {
            return fail("max_tokens must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail(format!("top_p {} not in (0, 1]", self.top_p));
        }
        if !self.frequency_penalty.is_finite() || !self.presence_penalty.is_finite() {
            return fail("penalties must be finite".into());
        }
        if self.stop.is_empty() {
            return fail("stop list is empty".into());
        }
        Ok(())
    }
}

/// The recorded configuration: text-davinci-003 at temperature 0.9, 200
/// tokens, top_p 1, no frequency penalty, presence penalty 0.6, stopping at
/// either speaker prefix.
pub fn default_generation_params() -> GenerationParams {
    GenerationParams {
        model_id: "text-davinci-003".to_string(),
        temperature: 0.9,
        max_tokens: 200,
        top_p: 1.0,
        frequency_penalty: 0.0,
        presence_penalty: 0.6,
        stop: vec![HUMAN_PREFIX.to_string(), AI_PREFIX.to_string()],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    /// Persona and empathy directives plus the numbered cue menu.
    pub instructions: String,
    pub format_spec: String,
    pub exemplar: String,
}

/// The numbered option list for all four categories.
pub fn cue_menu() -> String {
    let taxonomy = canonical_taxonomy();
    let mut out = String::new();
    for category in CueCategory::ALL {
        let _ = writeln!(out, "{} options:", category.header());
        for option in taxonomy.options(category) {
            let _ = writeln!(out, "{}: {}", option.id, option.label);
        }
    }
    out
}

pub fn default_template() -> PromptTemplate {
    PromptTemplate::parse("default", DEFAULT_TEMPLATE).expect("bundled template is well-formed")
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Instructions,
    Format,
    Example,
}

impl Section {
    fn title(self) -> &'static str {
        match self {
            Section::Instructions => "INSTRUCTIONS",
            Section::Format => "FORMAT",
            Section::Example => "EXAMPLE",
        }
    }

    fn from_header(line: &str) -> Option<Section> {
        match line.trim_end() {
            "## INSTRUCTIONS" => Some(Section::Instructions),
            "## FORMAT" => Some(Section::Format),
            "## EXAMPLE" => Some(Section::Example),
            _ => None,
        }
    }
}

impl PromptTemplate {
    /// Parses the three-section template document. A `{{cue_menu}}` line in
    /// the instructions is replaced by the numbered option list; if absent,
    /// the list is appended so the model always sees the closed set.
    pub fn parse(name: &str, text: &str) -> Result<Self, PromptError> {
        let mut sections: [Option<String>; 3] = [None, None, None];
        let mut current: Option<Section> = None;
        for (n, line) in text.lines().enumerate() {
            if let Some(section) = Section::from_header(line) {
                let slot = &mut sections[section as usize];
                if slot.is_some() {
                    return Err(PromptError::DuplicateSection(section.title()));
                }
                *slot = Some(String::new());
                current = Some(section);
                continue;
            }
            match current {
                Some(section) => {
                    let body = sections[section as usize].as_mut().expect("section opened");
                    body.push_str(line.trim_end_matches('\r'));
                    body.push('\n');
                }
                None if line.trim().is_empty() => {}
                None => return Err(PromptError::StrayText { line: n + 1 }),
            }
        }
        let [instructions, format_spec, exemplar] = sections;
        let instructions = instructions.ok_or(PromptError::MissingSection("INSTRUCTIONS"))?;
        let format_spec = format_spec.ok_or(PromptError::MissingSection("FORMAT"))?;
        let exemplar = exemplar.ok_or(PromptError::MissingSection("EXAMPLE"))?;

        let menu = cue_menu();
        let instructions = if instructions.contains(CUE_MENU_PLACEHOLDER) {
            instructions.replace(CUE_MENU_PLACEHOLDER, menu.trim_end())
        } else {
            format!("{}\n\n{}", instructions.trim_end(), menu)
        };

        if !format_names_cues_in_order(&format_spec) {
            return Err(PromptError::IncompleteFormat);
        }

        Ok(Self {
            name: name.to_string(),
            instructions: instructions.trim().to_string(),
            format_spec: format_spec.trim().to_string(),
            exemplar: exemplar.trim().to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom");
        Self::parse(name, &text)
    }
}

fn format_names_cues_in_order(format_spec: &str) -> bool {
    let mut rest = format_spec;
    for category in CueCategory::ALL {
        let header = format!("{}:", category.header());
        match rest.find(&header) {
            Some(pos) => rest = &rest[pos + header.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Human,
    #[serde(rename = "AI")]
    Ai,
}

impl Speaker {
    pub fn prefix(self) -> &'static str {
        match self {
            Speaker::Human => HUMAN_PREFIX,
            Speaker::Ai => AI_PREFIX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub speaker: Speaker,
    pub text: String,
}

/// Chronological dialogue turns preceding the new client message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub turns: Vec<HistoryTurn>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) {
        self.turns.push(HistoryTurn { speaker, text: text.into() });
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

pub fn build_prompt(
    template: &PromptTemplate,
    history: &DialogueHistory,
    user_message: &str,
) -> Result<String, PromptError> {
    render(template, &history.turns, user_message)
}

fn render(template: &PromptTemplate, turns: &[HistoryTurn], user_message: &str) -> Result<String, PromptError> {
    let message = user_message.trim();
    if message.is_empty() {
        return Err(PromptError::EmptyMessage);
    }
    let mut out =
        String::with_capacity(template.instructions.len() + template.format_spec.len() + template.exemplar.len() + 256);
    out.push_str(&template.instructions);
    out.push_str("\n\n");
    out.push_str(&template.format_spec);
    out.push_str("\n\n");
    out.push_str(&template.exemplar);
    out.push_str("\n\n");
    for turn in turns {
        out.push_str(turn.speaker.prefix());
        out.push(' ');
        out.push_str(turn.text.trim());
        out.push('\n');
    }
    out.push_str(HUMAN_PREFIX);
    out.push(' ');
    out.push_str(message);
    out.push('\n');
    out.push_str(AI_PREFIX);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BudgetReport {
    pub prompt_tokens: usize,
    pub completion_tokens: u32,
    pub context_limit: usize,
    pub over_budget: bool,
}

/// Rough token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub fn estimate_budget(prompt: &str, params: &GenerationParams) -> BudgetReport {
    estimate_budget_with_limit(prompt, params, DEFAULT_CONTEXT_LIMIT)
}

pub fn estimate_budget_with_limit(prompt: &str, params: &GenerationParams, context_limit: usize) -> BudgetReport {
    let prompt_tokens = estimate_tokens(prompt);
    BudgetReport {
        prompt_tokens,
        completion_tokens: params.max_tokens,
        context_limit,
        over_budget: prompt_tokens + params.max_tokens as usize > context_limit,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub text: String,
    /// Number of oldest history turns left out to fit the context limit.
    pub dropped_turns: usize,
    pub budget: BudgetReport,
}

/// Like [`build_prompt`], but drops the oldest history turns two at a time
/// until the estimate fits `context_limit`. The new message is always kept,
/// even if the prompt is still over budget with no history left.
pub fn build_prompt_within_budget(
    template: &PromptTemplate,
    history: &DialogueHistory,
    user_message: &str,
    params: &GenerationParams,
    context_limit: usize,
) -> Result<BuiltPrompt, PromptError> {
    let mut start = 0;
    loop {
        let text = render(template, &history.turns[start..], user_message)?;
        let budget = estimate_budget_with_limit(&text, params, context_limit);
        if !budget.over_budget || start == history.turns.len() {
            return Ok(BuiltPrompt { text, dropped_turns: start, budget });
        }
        start = (start + 2).min(history.turns.len());
    }
}
