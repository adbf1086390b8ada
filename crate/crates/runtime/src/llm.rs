//! Chat-completion HTTP backend and backend selection.
//!
//! Request: `POST <endpoint>` with
//! `{"model", "messages": [{"role":"system",..}, {"role":"user",..}], "temperature": 0}`
//! and `Authorization: Bearer <key>` when the key variable is set. The reply
//! text is read from `choices[0].message.content`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use twinloop_core::plant::PlantConfig;
use twinloop_core::scenario::{
    BackendError, BackendKind, LlmBackend, PromptBundle, ReplayFixture, RequestKey, TemplateOffline, Unconfigured,
};

pub const DEFAULT_API_KEY_ENV: &str = "TWINLOOP_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub fixtures_dir: Option<PathBuf>,
    pub timeout_s: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::TemplateOffline,
            endpoint: None,
            model: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            fixtures_dir: None,
            timeout_s: 120.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteHttp {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl RemoteHttp {
    /// Needs an endpoint and a model; the key is optional so local servers work.
    pub fn from_config(cfg: &LlmConfig, env: impl Fn(&str) -> Option<String>) -> Result<Self, BackendError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| BackendError::NotConfigured("remote_http needs llm.endpoint".into()))?;
        let model = cfg
            .model
            .clone()
            .ok_or_else(|| BackendError::NotConfigured("remote_http needs llm.model".into()))?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s.max(1.0)))
            .build()
            .map_err(|e| BackendError::NotConfigured(format!("http client: {e}")))?;
        Ok(RemoteHttp {
            client,
            endpoint,
            model,
            api_key: env(&cfg.api_key_env).filter(|k| !k.is_empty()),
        })
    }

    pub fn request_body(&self, bundle: &PromptBundle) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": bundle.bpmn_creation_prompt},
                {"role": "user", "content": bundle.user_message()},
            ],
            "temperature": 0,
        })
    }
}

#[async_trait]
impl LlmBackend for RemoteHttp {
    fn kind(&self) -> BackendKind {
        BackendKind::RemoteHttp
    }

    async fn complete(&self, bundle: &PromptBundle, _key: RequestKey<'_>) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.endpoint).json(&self.request_body(bundle));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = body.chars().take(200).collect();
            return Err(BackendError::Transport(format!("HTTP {status}: {snippet}")));
        }
        let v: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Transport(format!("malformed response JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))
    }
}

/// Builds the backend of `kind` for one plant. Missing settings produce an
/// [`Unconfigured`] backend that fails on use, so the error surfaces on the
/// action that needs it.
pub fn make_backend(
    kind: BackendKind,
    cfg: &LlmConfig,
    plant: &PlantConfig,
    env: impl Fn(&str) -> Option<String>,
) -> Arc<dyn LlmBackend> {
    let unconfigured = |reason: String| -> Arc<dyn LlmBackend> { Arc::new(Unconfigured { kind, reason }) };
    match kind {
        BackendKind::TemplateOffline => Arc::new(TemplateOffline::new(plant.clone())),
        BackendKind::ReplayFixture => match &cfg.fixtures_dir {
            None => unconfigured("replay_fixture needs llm.fixtures_dir".into()),
            Some(dir) => match ReplayFixture::load_dir(dir) {
                Ok(r) => Arc::new(r),
                Err(e) => unconfigured(e.to_string()),
            },
        },
        BackendKind::RemoteHttp => match RemoteHttp::from_config(cfg, env) {
            Ok(r) => Arc::new(r),
            Err(BackendError::NotConfigured(reason)) => unconfigured(reason),
            Err(e) => unconfigured(e.to_string()),
        },
    }
}
