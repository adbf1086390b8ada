//! One interface over a remote service and an in-process orchestrator.

use std::sync::Arc;

use futures::stream::BoxStream;
use futures::{StreamExt, TryStreamExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use twinloop_core::events::{Millis, TelemetrySample};
use twinloop_core::scenario::LoopAction;
use twinloop_runtime::service::{
    ActionResult, CreateScenario, DeployRequest, DeploymentView, IngestResult, Orchestrator, ProcessUpload,
    ScenarioView, ServiceError, StartRun, StreamItem,
};
use twinloop_runtime::store::RunRecord;

use crate::CliError;

pub enum Api {
    Remote { base: String, http: reqwest::Client },
    Local { orch: Arc<Orchestrator> },
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        CliError::Domain(format!("{}: {e}", e.code()))
    }
}

fn transport(e: reqwest::Error) -> CliError {
    CliError::Domain(format!("server unreachable: {e}"))
}

impl Api {
    pub fn remote(url: &str) -> Self {
        let base = url.trim_end_matches('/');
        let base = if base.ends_with("/api/v1") {
            base.to_string()
        } else {
            format!("{base}/api/v1")
        };
        Api::Remote {
            base,
            http: reqwest::Client::new(),
        }
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T, CliError> {
        let resp = req.send().await.map_err(transport)?;
        let status = resp.status();
        let text = resp.text().await.map_err(transport)?;
        if !status.is_success() {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
            let code = v
                .pointer("/error/code")
                .and_then(|c| c.as_str())
                .unwrap_or("http_error");
            let msg = v.pointer("/error/message").and_then(|c| c.as_str()).unwrap_or(&text);
            return Err(CliError::Domain(format!("{code}: {msg} (HTTP {})", status.as_u16())));
        }
        serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("unexpected server reply: {e}")))
    }

    async fn post_bytes<T: DeserializeOwned>(&self, path: &str, body: Vec<u8>) -> Result<T, CliError> {
        let Api::Remote { base, http } = self else {
            unreachable!("remote only")
        };
        self.send(http.post(format!("{base}{path}")).body(body)).await
    }

    async fn post_json<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T, CliError> {
        let Api::Remote { base, http } = self else {
            unreachable!("remote only")
        };
        self.send(http.post(format!("{base}{path}")).json(body)).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, CliError> {
        let Api::Remote { base, http } = self else {
            unreachable!("remote only")
        };
        self.send(http.get(format!("{base}{path}"))).await
    }

    pub async fn ingest(&self, aml: Vec<u8>) -> Result<IngestResult, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.ingest_plant(&aml)?),
            Api::Remote { .. } => self.post_bytes("/plants", aml).await,
        }
    }

    pub async fn deploy(&self, plant_id: &str, req: &DeployRequest) -> Result<DeploymentView, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.deploy(plant_id, req.clone()).await?),
            Api::Remote { .. } => self.post_json(&format!("/plants/{plant_id}/deploy"), req).await,
        }
    }

    pub async fn deployments(&self) -> Result<Vec<DeploymentView>, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.deployments()),
            Api::Remote { .. } => self.get("/deployments").await,
        }
    }

    pub async fn upload_process(&self, xml: Vec<u8>) -> Result<ProcessUpload, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.upload_process(&xml)?),
            Api::Remote { .. } => self.post_bytes("/processes", xml).await,
        }
    }

    pub async fn start_run(&self, deployment_id: &str, req: &StartRun) -> Result<RunRecord, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.start_run(deployment_id, req.clone()).await?),
            Api::Remote { .. } => self.post_json(&format!("/deployments/{deployment_id}/runs"), req).await,
        }
    }

    pub async fn run(&self, run_id: &str) -> Result<RunRecord, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.run(run_id)?),
            Api::Remote { .. } => self.get(&format!("/runs/{run_id}")).await,
        }
    }

    pub async fn events(&self, run_id: &str) -> Result<BoxStream<'static, Result<StreamItem, CliError>>, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.stream_events(run_id)?.map(Ok).boxed()),
            Api::Remote { base, http } => {
                let resp = http
                    .get(format!("{base}/runs/{run_id}/events"))
                    .send()
                    .await
                    .map_err(transport)?;
                if !resp.status().is_success() {
                    return Err(CliError::Domain(format!(
                        "run {run_id}: HTTP {}",
                        resp.status().as_u16()
                    )));
                }
                Ok(ndjson_lines(resp.bytes_stream().map_err(transport).boxed()))
            }
        }
    }

    pub async fn create_scenario(&self, req: &CreateScenario) -> Result<ScenarioView, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.create_scenario(req.clone())?),
            Api::Remote { .. } => self.post_json("/scenarios", req).await,
        }
    }

    pub async fn scenario_action(&self, scenario_id: &str, action: LoopAction) -> Result<ActionResult, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.scenario_action(scenario_id, action).await?),
            Api::Remote { .. } => {
                let (name, body) = match &action {
                    LoopAction::Generate => ("generate", serde_json::json!({})),
                    LoopAction::Simulate => ("simulate", serde_json::json!({})),
                    LoopAction::Accept => ("accept", serde_json::json!({})),
                    LoopAction::Reject => ("reject", serde_json::json!({})),
                    LoopAction::Corrective(t) => ("corrective", serde_json::json!({ "text": t })),
                };
                self.post_json(&format!("/scenarios/{scenario_id}/{name}"), &body).await
            }
        }
    }

    pub async fn document(&self, doc_id: &str) -> Result<Vec<u8>, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.document(doc_id)?.1),
            Api::Remote { base, http } => {
                let resp = http
                    .get(format!("{base}/documents/{doc_id}"))
                    .send()
                    .await
                    .map_err(transport)?;
                if !resp.status().is_success() {
                    return Err(CliError::Domain(format!(
                        "document {doc_id}: HTTP {}",
                        resp.status().as_u16()
                    )));
                }
                Ok(resp.bytes().await.map_err(transport)?.to_vec())
            }
        }
    }

    pub async fn telemetry(
        &self,
        filter: &str,
        from: Option<Millis>,
        to: Option<Millis>,
    ) -> Result<Vec<TelemetrySample>, CliError> {
        match self {
            Api::Local { orch } => Ok(orch.query_telemetry(filter, from, to)?),
            Api::Remote { base, http } => {
                let mut q: Vec<(&str, String)> = vec![("filter", filter.to_string())];
                q.extend(from.map(|f| ("from", f.to_string())));
                q.extend(to.map(|t| ("to", t.to_string())));
                self.send(http.get(format!("{base}/telemetry")).query(&q)).await
            }
        }
    }

    pub async fn telemetry_stream(
        &self,
        filter: &str,
    ) -> Result<BoxStream<'static, Result<TelemetrySample, CliError>>, CliError> {
        match self {
            Api::Local { orch } => {
                let f = twinloop_core::events::TopicFilter::parse(filter)
                    .map_err(|e| CliError::Domain(format!("invalid filter: {e}")))?;
                Ok(orch.telemetry_bus().subscribe(f).map(Ok).boxed())
            }
            Api::Remote { base, http } => {
                let resp = http
                    .get(format!("{base}/telemetry/stream"))
                    .query(&[("filter", filter)])
                    .send()
                    .await
                    .map_err(transport)?;
                if !resp.status().is_success() {
                    return Err(CliError::Domain(format!(
                        "telemetry stream: HTTP {}",
                        resp.status().as_u16()
                    )));
                }
                Ok(ndjson_lines(resp.bytes_stream().map_err(transport).boxed()))
            }
        }
    }
}

/// Splits a byte stream into lines and parses each as JSON.
fn ndjson_lines<T: DeserializeOwned + Send + 'static>(
    bytes: BoxStream<'static, Result<impl AsRef<[u8]> + Send + 'static, CliError>>,
) -> BoxStream<'static, Result<T, CliError>> {
    futures::stream::unfold(
        (bytes, Vec::<u8>::new(), false),
        |(mut bytes, mut buf, mut eof)| async move {
            loop {
                if let Some(pos) = buf.iter().position(|&b| b == b'\n') {
                    let line: Vec<u8> = buf.drain(..=pos).collect();
                    if line.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    let item = serde_json::from_slice(&line)
                        .map_err(|e| CliError::Domain(format!("malformed stream line: {e}")));
                    return Some((item, (bytes, buf, eof)));
                }
                if eof {
                    return None;
                }
                match bytes.next().await {
                    Some(Ok(chunk)) => buf.extend_from_slice(chunk.as_ref()),
                    Some(Err(e)) => return Some((Err(e), (bytes, buf, true))),
                    None => {
                        eof = true;
                        if !buf.is_empty() {
                            buf.push(b'\n');
                        }
                    }
                }
            }
        },
    )
    .boxed()
}
