//! HTTP/JSON API under `/api/v1`.
//!
//! Errors are `{"error": {"code", "message", "detail"}}`. Streams are
//! `application/x-ndjson`, one JSON object per line.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use twinloop_core::events::{Millis, TopicFilter};
use twinloop_core::scenario::LoopAction;

use crate::service::{CreateScenario, DeployRequest, Orchestrator, ServiceError, StartRun};

pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    detail: serde_json::Value,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request".into(),
            message: message.into(),
            detail: serde_json::Value::Null,
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError {
            status: StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            code: e.code().into(),
            message: e.to_string(),
            detail: e.detail(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message, "detail": self.detail}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Orch = State<Arc<Orchestrator>>;

fn parse_json<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn created<T: Serialize>(v: T) -> Response {
    (StatusCode::CREATED, Json(v)).into_response()
}

fn ndjson<S, T>(stream: S) -> Response
where
    S: Stream<Item = T> + Send + 'static,
    T: Serialize,
{
    let lines = stream.map(|item| {
        let mut line = serde_json::to_vec(&item).expect("stream item serializes");
        line.push(b'\n');
        Ok::<_, Infallible>(Bytes::from(line))
    });
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(lines),
    )
        .into_response()
}

pub fn router(orch: Arc<Orchestrator>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/plants", post(ingest_plant).get(list_plants))
        .route("/plants/{id}", get(get_plant))
        .route("/plants/{id}/config", get(get_plant_config))
        .route("/plants/{id}/deploy", post(deploy))
        .route("/deployments", get(list_deployments))
        .route("/deployments/{id}", get(get_deployment).delete(stop_deployment))
        .route("/deployments/{id}/wire", get(get_wire))
        .route("/deployments/{id}/runs", post(start_run))
        .route("/processes", post(upload_process))
        .route("/documents", get(list_documents))
        .route("/documents/{id}", get(get_document))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/log", get(get_run_log))
        .route("/runs/{id}/events", get(run_events))
        .route("/scenarios", post(create_scenario).get(list_scenarios))
        .route("/scenarios/{id}", get(get_scenario))
        .route("/scenarios/{id}/{action}", post(scenario_action))
        .route("/telemetry", get(query_telemetry))
        .route("/telemetry/stream", get(stream_telemetry));
    Router::new().nest("/api/v1", api).fallback(not_found).with_state(orch)
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found".into(),
        message: "no such endpoint".into(),
        detail: serde_json::Value::Null,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

async fn ingest_plant(State(o): Orch, body: Bytes) -> ApiResult<Response> {
    Ok(created(o.ingest_plant(&body)?))
}

async fn list_plants(State(o): Orch) -> Response {
    Json(o.catalog().plants.into_values().collect::<Vec<_>>()).into_response()
}

async fn get_plant(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(o.plant(&id)?).into_response())
}

async fn get_plant_config(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    let text = o.plant_config_text(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn deploy(State(o): Orch, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: DeployRequest = parse_json(&body)?;
    Ok(created(o.deploy(&id, req).await?))
}

async fn list_deployments(State(o): Orch) -> Response {
    Json(o.deployments()).into_response()
}

async fn get_deployment(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(o.deployment(&id)?.view()).into_response())
}

async fn stop_deployment(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(o.stop_deployment(&id)?).into_response())
}

async fn get_wire(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(o.wire_ops(&id)?).into_response())
}

async fn start_run(State(o): Orch, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: StartRun = parse_required(&body)?;
    Ok(created(o.start_run(&id, req).await?))
}

async fn upload_process(State(o): Orch, body: Bytes) -> ApiResult<Response> {
    Ok(created(o.upload_process(&body)?))
}

async fn list_documents(State(o): Orch) -> Response {
    Json(o.documents()).into_response()
}

async fn get_document(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    let (meta, body) = o.document(&id)?;
    Ok(([(header::CONTENT_TYPE, meta.kind.media_type())], body).into_response())
}

async fn list_runs(State(o): Orch) -> Response {
    Json(o.catalog().runs.into_values().collect::<Vec<_>>()).into_response()
}

async fn get_run(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(o.run(&id)?).into_response())
}

async fn get_run_log(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    match o.run_log(&id)? {
        Some(log) => Ok(Json(log).into_response()),
        None => Err(ApiError {
            status: StatusCode::CONFLICT,
            code: "run_unfinished".into(),
            message: format!("run {id} has no log yet"),
            detail: serde_json::Value::Null,
        }),
    }
}

async fn run_events(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ndjson(o.stream_events(&id)?))
}

async fn create_scenario(State(o): Orch, body: Bytes) -> ApiResult<Response> {
    let req: CreateScenario = parse_required(&body)?;
    Ok(created(o.create_scenario(req)?))
}

async fn list_scenarios(State(o): Orch) -> Response {
    Json(o.catalog().scenarios.into_values().collect::<Vec<_>>()).into_response()
}

async fn get_scenario(State(o): Orch, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(o.scenario(&id)?).into_response())
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorrectiveBody {
    text: String,
}

async fn scenario_action(
    State(o): Orch,
    Path((id, action)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let action = match action.as_str() {
        "generate" => LoopAction::Generate,
        "simulate" => LoopAction::Simulate,
        "accept" => LoopAction::Accept,
        "reject" => LoopAction::Reject,
        "corrective" => {
            let b: CorrectiveBody = parse_json(&body)?;
            if b.text.trim().is_empty() {
                return Err(ApiError::bad_request("corrective needs a non-empty \"text\""));
            }
            LoopAction::Corrective(b.text)
        }
        _ => return Err(not_found().await),
    };
    Ok(Json(o.scenario_action(&id, action).await?).into_response())
}

#[derive(Deserialize)]
struct TelemetryQuery {
    filter: Option<String>,
    from: Option<Millis>,
    to: Option<Millis>,
}

async fn query_telemetry(State(o): Orch, Query(q): Query<TelemetryQuery>) -> ApiResult<Response> {
    let filter = q.filter.as_deref().unwrap_or("#");
    Ok(Json(o.query_telemetry(filter, q.from, q.to)?).into_response())
}

async fn stream_telemetry(State(o): Orch, Query(q): Query<TelemetryQuery>) -> ApiResult<Response> {
    let filter = TopicFilter::parse(q.filter.as_deref().unwrap_or("#"))
        .map_err(|e| ApiError::from(ServiceError::Telemetry(e.into())))?;
    Ok(ndjson(o.telemetry_bus().subscribe(filter)))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    orch: Arc<Orchestrator>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(orch))
        .with_graceful_shutdown(shutdown)
        .await
}
