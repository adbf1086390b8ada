//! Service configuration: one TOML file plus `TWINLOOP_*` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinloop_core::scenario::BackendKind;

use crate::adapter::RetryPolicy;
use crate::clock::{ClockMode, ClockOptions};
use crate::llm::LlmConfig;
use crate::plant::PortPolicy;
use crate::telemetry::DEFAULT_RING_CAPACITY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTuning {
    pub poll_interval_ms: u64,
    pub snapshot_every: u32,
    pub handshake_poll_ms: u64,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
}

impl Default for AdapterTuning {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        AdapterTuning {
            poll_interval_ms: 250,
            snapshot_every: 10,
            handshake_poll_ms: 50,
            retry_attempts: retry.attempts,
            retry_backoff_ms: retry.backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// HTTP listen address.
    pub bind: String,
    /// Clock of virtual deployments.
    pub clock: ClockOptions,
    /// Clock of the private plants used by scenario simulations.
    pub simulation_clock: ClockOptions,
    pub ports: PortPolicy,
    pub port_overrides: BTreeMap<String, u16>,
    pub telemetry_capacity: usize,
    pub adapters: AdapterTuning,
    pub llm: LlmConfig,
    /// `mqtt://host[:port]`; telemetry is republished there when set.
    pub mqtt_url: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("twinloop-data"),
            bind: "127.0.0.1:8080".into(),
            clock: ClockOptions::realtime(1.0),
            simulation_clock: ClockOptions::fast_forward(0.05, 1),
            ports: PortPolicy::Defaults,
            port_overrides: BTreeMap::new(),
            telemetry_capacity: DEFAULT_RING_CAPACITY,
            adapters: AdapterTuning::default(),
            llm: LlmConfig::default(),
            mqtt_url: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("{var}={value:?}: {reason}")]
    Env { var: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn parse_kind<T: for<'de> Deserialize<'de>>(value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|e| e.to_string())
}

impl ServiceConfig {
    /// Reads `path` if given, then applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            None => ServiceConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Toml {
                    path: p.to_path_buf(),
                    source,
                })?
            }
        };
        for (var, value) in env {
            cfg.apply_env(&var, &value).map_err(|reason| ConfigError::Env {
                var: var.clone(),
                value: value.clone(),
                reason,
            })?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn apply_env(&mut self, var: &str, value: &str) -> Result<(), String> {
        match var {
            "TWINLOOP_DATA_DIR" => self.data_dir = value.into(),
            "TWINLOOP_BIND" => self.bind = value.into(),
            "TWINLOOP_LLM_BACKEND" => self.llm.backend = parse_kind::<BackendKind>(value)?,
            "TWINLOOP_LLM_ENDPOINT" => self.llm.endpoint = Some(value.into()),
            "TWINLOOP_LLM_MODEL" => self.llm.model = Some(value.into()),
            "TWINLOOP_LLM_API_KEY_ENV" => self.llm.api_key_env = value.into(),
            "TWINLOOP_LLM_FIXTURES" => self.llm.fixtures_dir = Some(value.into()),
            "TWINLOOP_MQTT_URL" => self.mqtt_url = Some(value.into()).filter(|v: &String| !v.is_empty()),
            "TWINLOOP_PORTS" => self.ports = parse_kind::<PortPolicy>(value)?,
            "TWINLOOP_CLOCK" => {
                self.clock = match value {
                    "realtime" => ClockOptions::realtime(self.clock.scale),
                    "fast_forward" | "stepped" => ClockOptions::fast_forward(self.clock.step_s, self.clock.pace_ms),
                    other => return Err(format!("unknown clock {other:?}, expected realtime or fast_forward")),
                }
            }
            "TWINLOOP_CLOCK_SCALE" => self.clock.scale = value.parse().map_err(|e| format!("{e}"))?,
            _ => {}
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.clock.check().map_err(ConfigError::Invalid)?;
        self.simulation_clock.check().map_err(ConfigError::Invalid)?;
        if self.clock.mode == ClockMode::Stepped && !self.clock.auto_step {
            return Err(ConfigError::Invalid(
                "a service clock must advance on its own: use realtime or auto_step".into(),
            ));
        }
        if self.telemetry_capacity == 0 {
            return Err(ConfigError::Invalid("telemetry_capacity must be positive".into()));
        }
        if let Some(url) = &self.mqtt_url {
            parse_mqtt_url(url).map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.adapters.retry_attempts,
            backoff_ms: self.adapters.retry_backoff_ms,
        }
    }
}

/// Splits `mqtt://host[:port]` into host and port (default 1883).
pub fn parse_mqtt_url(url: &str) -> Result<(String, u16), String> {
    let rest = url
        .strip_prefix("mqtt://")
        .or_else(|| url.strip_prefix("tcp://"))
        .ok_or_else(|| format!("mqtt url {url:?} must start with mqtt://"))?;
    let rest = rest.trim_end_matches('/');
    match rest.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() => {
            let port = port.parse().map_err(|_| format!("bad mqtt port in {url:?}"))?;
            Ok((host.to_string(), port))
        }
        None if !rest.is_empty() => Ok((rest.to_string(), 1883)),
        _ => Err(format!("mqtt url {url:?} has no host")),
    }
}
