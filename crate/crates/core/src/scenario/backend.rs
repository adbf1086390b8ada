use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::prompt::PromptBundle;
use super::template::compile_steps_xml;
use crate::plant::PlantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteHttp,
    ReplayFixture,
    TemplateOffline,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// The backend cannot be used as configured (missing endpoint, key, fixture).
    #[error("backend not configured: {0}")]
    NotConfigured(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("generation error: {0}")]
    Generation(String),
}

/// Identifies a request for backends that replay recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestKey<'a> {
    pub scenario_id: &'a str,
    pub iteration: u32,
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Returns the model's reply text for the prompt.
    async fn complete(&self, bundle: &PromptBundle, key: RequestKey<'_>) -> Result<String, BackendError>;
}

/// Deterministic backend: the goal must be a `steps: [...]` list, compiled
/// straight to BPMN against the plant config.
#[derive(Debug, Clone)]
pub struct TemplateOffline {
    config: PlantConfig,
}

impl TemplateOffline {
    pub fn new(config: PlantConfig) -> Self {
        TemplateOffline { config }
    }
}

#[async_trait]
impl LlmBackend for TemplateOffline {
    fn kind(&self) -> BackendKind {
        BackendKind::TemplateOffline
    }

    async fn complete(&self, bundle: &PromptBundle, _key: RequestKey<'_>) -> Result<String, BackendError> {
        compile_steps_xml(&self.config, &bundle.goal_description).map_err(|e| BackendError::Generation(e.to_string()))
    }
}

/// Scenario id under which a recording applies to every scenario.
pub const ANY_SCENARIO: &str = "_";

/// Replays recorded replies. On disk a fixture is a directory of
/// `<scenario_id>/<iteration>.txt` files; `_` matches any scenario.
#[derive(Debug, Clone, Default)]
pub struct ReplayFixture {
    recordings: BTreeMap<(String, u32), String>,
}

impl ReplayFixture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scenario_id: &str, iteration: u32, text: impl Into<String>) {
        self.recordings
            .insert((scenario_id.to_string(), iteration), text.into());
    }

    pub fn load_dir(dir: &Path) -> Result<Self, BackendError> {
        let cfg = |e: std::io::Error, p: &PathBuf| {
            BackendError::NotConfigured(format!("replay fixture {}: {e}", p.display()))
        };
        let mut f = ReplayFixture::new();
        let root = dir.to_path_buf();
        for scen in std::fs::read_dir(dir).map_err(|e| cfg(e, &root))? {
            let scen = scen.map_err(|e| cfg(e, &root))?.path();
            if !scen.is_dir() {
                continue;
            }
            let sid = scen
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            for file in std::fs::read_dir(&scen).map_err(|e| cfg(e, &scen))? {
                let path = file.map_err(|e| cfg(e, &scen))?.path();
                let iter = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(".txt"))
                    .and_then(|n| n.parse::<u32>().ok());
                if let Some(i) = iter {
                    let text = std::fs::read_to_string(&path).map_err(|e| cfg(e, &path))?;
                    f.insert(&sid, i, text);
                }
            }
        }
        if f.recordings.is_empty() {
            return Err(BackendError::NotConfigured(format!(
                "replay fixture {} has no recordings",
                dir.display()
            )));
        }
        Ok(f)
    }

    pub fn lookup(&self, key: RequestKey<'_>) -> Option<&str> {
        self.recordings
            .get(&(key.scenario_id.to_string(), key.iteration))
            .or_else(|| self.recordings.get(&(ANY_SCENARIO.to_string(), key.iteration)))
            .map(String::as_str)
    }
}

#[async_trait]
impl LlmBackend for ReplayFixture {
    fn kind(&self) -> BackendKind {
        BackendKind::ReplayFixture
    }

    async fn complete(&self, _bundle: &PromptBundle, key: RequestKey<'_>) -> Result<String, BackendError> {
        self.lookup(key).map(str::to_string).ok_or_else(|| {
            BackendError::Generation(format!(
                "no recorded response for scenario {} iteration {}",
                key.scenario_id, key.iteration
            ))
        })
    }
}

/// Placeholder for a backend kind that is selected but lacks settings.
#[derive(Debug, Clone)]
pub struct Unconfigured {
    pub kind: BackendKind,
    pub reason: String,
}

#[async_trait]
impl LlmBackend for Unconfigured {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    async fn complete(&self, _bundle: &PromptBundle, _key: RequestKey<'_>) -> Result<String, BackendError> {
        Err(BackendError::NotConfigured(self.reason.clone()))
    }
}
