//! Flags shared by the commands that talk to a completion backend.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use cues_core::backend::{BackendConfig, CompletionBackend, HttpBackend, ScriptedBackend};
use cues_core::parser::ResponseParser;
use cues_core::prompt::{default_generation_params, default_template, GenerationParams, PromptTemplate};
use cues_core::taxonomy::LabelMatcher;

use crate::{failure, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Scripted,
    Http,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Scripted => "scripted",
            BackendKind::Http => "http",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Completion backend.
    #[arg(long, value_enum, default_value_t = BackendKind::Http)]
    pub backend: BackendKind,
    /// JSONL fixture for the scripted backend.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Prompt template file with INSTRUCTIONS, FORMAT and EXAMPLE sections.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Base URL of an OpenAI-compatible server.
    #[arg(long, env = "CUES_BASE_URL")]
    pub base_url: Option<String>,
    /// Extra label synonyms, e.g. {"face": {"Neutral expression": 4}}.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
}

impl BackendArgs {
    pub fn template(&self) -> Result<PromptTemplate, CliError> {
        match &self.template {
            Some(path) => PromptTemplate::from_file(path).map_err(failure),
            None => Ok(default_template()),
        }
    }

    pub fn params(&self) -> Result<GenerationParams, CliError> {
        let mut params = default_generation_params();
        if let Some(model) = &self.model {
            params.model_id = model.clone();
        }
        if let Some(t) = self.temperature {
            params.temperature = t;
        }
        if let Some(n) = self.max_tokens {
            params.max_tokens = n;
        }
        params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(params)
    }

    pub fn parser(&self) -> Result<ResponseParser, CliError> {
        let matcher = match &self.synonyms {
            Some(path) => {
                let doc = std::fs::read_to_string(path).map_err(|e| failure(format!("{}: {e}", path.display())))?;
                LabelMatcher::from_json_str(&doc).map_err(failure)?
            }
            None => LabelMatcher::default(),
        };
        Ok(ResponseParser::new(matcher))
    }

    pub fn backend(&self) -> Result<Arc<dyn CompletionBackend>, CliError> {
        match self.backend {
            BackendKind::Scripted => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--backend scripted requires --fixture <path>".into()))?;
                Ok(Arc::new(ScriptedBackend::from_file(path).map_err(failure)?))
            }
            BackendKind::Http => {
                let mut config = BackendConfig::default();
                if let Some(url) = &self.base_url {
                    config.base_url = url.clone();
                }
                let mut backend = HttpBackend::new(config).map_err(|e| CliError::Usage(e.to_string()))?;
                if let Some(model) = &self.model {
                    backend.set_health_model(model.clone());
                }
                Ok(Arc::new(backend))
            }
        }
    }
}
