//! The orchestrator: plant ingestion, deployments, runs, scenarios and
//! telemetry on top of the document store.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, watch};
use twinloop_core::aml::{parse_caex, validate_structure, AmlError, Finding};
use twinloop_core::bpmn::{
    bind_process, execute, parse_bpmn, BpmnProcess, Dispatch, Dispatcher, ExecPolicy, LogEntry, ParseMode, RunLog,
    RunOutcome, Vars,
};
use twinloop_core::events::{CommandEnvelope, Millis, Mode, RunEvent, RunEventKind, TelemetrySample};
use twinloop_core::ids::slug;
use twinloop_core::plant::{
    deserialize_config, extract_plant_config, serialize_config, Endpoint, PlantConfig, RoleMapping,
};
use twinloop_core::scenario::{
    advance_loop, ActionKind, BackendError, BackendKind, LoopAction, LoopEnv, LoopError, LoopPhase, ScenarioLoopState,
    Simulator, Transition,
};

use crate::adapter::{spawn_adapter, Ack, AdapterContext, AdapterEvent, AdapterHandle, AdapterSpec, RetryPolicy};
use crate::clock::{spawn_driver, ClockOptions, SimClock};
use crate::config::{AdapterTuning, ServiceConfig};
use crate::llm::make_backend;
use crate::plant::{start_virtual_plant, PlantEndpoint, PlantHandle, PlantOptions, PortPolicy};
use crate::store::{
    now_ms, sha256_hex, Catalog, DocKind, DocStore, Journal, PlantRecord, RunRecord, RunStatus, ScenarioRecord,
    StoreError, StoredDocument,
};
use crate::telemetry::{TelemetryBus, TelemetryError, TelemetryStore};
use crate::wire::{WireOp, WireTap};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{message}")]
    Invalid {
        code: &'static str,
        message: String,
        detail: serde_json::Value,
    },
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ServiceError {
    fn not_found(kind: &'static str, id: &str) -> Self {
        ServiceError::NotFound { kind, id: id.into() }
    }

    fn invalid(code: &'static str, message: impl Into<String>, detail: serde_json::Value) -> Self {
        ServiceError::Invalid {
            code,
            message: message.into(),
            detail,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Conflict { code, .. } | ServiceError::Invalid { code, .. } => code,
            ServiceError::Loop(LoopError::Illegal { .. }) => "illegal_action",
            ServiceError::Loop(LoopError::NoCompletedRun(_)) => "no_completed_run",
            ServiceError::Loop(LoopError::Backend(BackendError::NotConfigured(_))) => "backend_not_configured",
            ServiceError::Loop(LoopError::Backend(BackendError::Transport(_))) => "backend_transport",
            ServiceError::Loop(LoopError::Backend(BackendError::Generation(_))) => "generation_failed",
            ServiceError::Telemetry(TelemetryError::Filter(_)) => "invalid_filter",
            ServiceError::Telemetry(TelemetryError::Range { .. }) => "invalid_range",
            ServiceError::Telemetry(TelemetryError::Io(_)) | ServiceError::Store(_) => "storage",
        }
    }

    /// HTTP status class of the error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound { .. } => 404,
            ServiceError::Conflict { .. } => 409,
            ServiceError::Invalid { .. } => 422,
            ServiceError::Loop(LoopError::Illegal { .. } | LoopError::NoCompletedRun(_)) => 409,
            ServiceError::Loop(LoopError::Backend(BackendError::Transport(_))) => 502,
            ServiceError::Loop(LoopError::Backend(_)) => 422,
            ServiceError::Telemetry(TelemetryError::Io(_)) | ServiceError::Store(_) => 500,
            ServiceError::Telemetry(_) => 400,
        }
    }

    pub fn detail(&self) -> serde_json::Value {
        match self {
            ServiceError::NotFound { kind, id } => json!({ "kind": kind, "id": id }),
            ServiceError::Invalid { detail, .. } => detail.clone(),
            ServiceError::Loop(LoopError::Illegal { action, phase, .. }) => json!({ "action": action, "phase": phase }),
            _ => serde_json::Value::Null,
        }
    }
}

type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentStatus {
    Configuring,
    Ready,
    Degraded,
    Stopped,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeployRequest {
    pub mode: Option<Mode>,
    /// Physical mode: controller_id -> endpoint replacing the configured one.
    pub endpoints: BTreeMap<String, Endpoint>,
    /// Overrides the configured retry budget for registration.
    pub retry_attempts: Option<u32>,
    /// Record adapter wire operations (see `GET /deployments/{id}/wire`).
    pub wire_tap: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterView {
    pub adapter_id: String,
    pub controller_id: String,
    pub target_endpoint: Endpoint,
    pub registered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentView {
    pub deployment_id: String,
    pub plant_id: String,
    pub mode: Mode,
    pub status: DeploymentStatus,
    pub adapters: Vec<AdapterView>,
    /// Listener endpoints of the virtual plant.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub endpoints: Vec<PlantEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: Millis,
}

struct DeploymentState {
    status: DeploymentStatus,
    adapters: Vec<AdapterHandle>,
    views: Vec<AdapterView>,
    endpoints: Vec<PlantEndpoint>,
    error: Option<String>,
    plant: Option<PlantHandle>,
    driver: Option<tokio::task::JoinHandle<()>>,
}

pub struct Deployment {
    pub deployment_id: String,
    pub plant_id: String,
    pub mode: Mode,
    pub config: Arc<PlantConfig>,
    clock: Mutex<Option<SimClock>>,
    tap: Option<WireTap>,
    events: broadcast::Sender<AdapterEvent>,
    created_at: Millis,
    state: Mutex<DeploymentState>,
}

impl Deployment {
    pub fn view(&self) -> DeploymentView {
        let s = self.state.lock().expect("deployment lock");
        DeploymentView {
            deployment_id: self.deployment_id.clone(),
            plant_id: self.plant_id.clone(),
            mode: self.mode,
            status: s.status,
            adapters: s.views.clone(),
            endpoints: s.endpoints.clone(),
            error: s.error.clone(),
            created_at: self.created_at,
        }
    }

    pub fn status(&self) -> DeploymentStatus {
        self.state.lock().expect("deployment lock").status
    }

    fn clock(&self) -> SimClock {
        self.clock
            .lock()
            .expect("clock lock")
            .clone()
            .expect("clock set once configured")
    }

    fn adapter_for(&self, capability_id: &str) -> Option<(AdapterHandle, String)> {
        let cap = self.config.capability(capability_id)?;
        let s = self.state.lock().expect("deployment lock");
        let a = s.adapters.iter().find(|a| a.controller_id() == cap.controller_id)?;
        Some((a.clone(), cap.machine_id.clone()))
    }

    fn stop(&self) {
        let mut s = self.state.lock().expect("deployment lock");
        for a in &s.adapters {
            a.stop();
        }
        if let Some(mut p) = s.plant.take() {
            p.stop();
        }
        if let Some(d) = s.driver.take() {
            d.abort();
        }
        s.status = DeploymentStatus::Stopped;
    }

    /// Lifecycle events of this deployment's adapters.
    pub fn subscribe(&self) -> broadcast::Receiver<AdapterEvent> {
        self.events.subscribe()
    }
}

/// One line of a run's event stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamItem {
    Run {
        run_id: String,
        deployment_id: String,
        process_id: String,
        mode: Mode,
        started_at: Millis,
    },
    Entry {
        #[serde(flatten)]
        entry: LogEntry,
    },
    Event {
        adapter_id: String,
        #[serde(flatten)]
        event: RunEvent,
    },
    Outcome {
        outcome: RunOutcome,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        run_log_doc: Option<String>,
    },
}

/// Replayable, append-only item list of one run.
struct RunChannel {
    items: Mutex<Vec<StreamItem>>,
    journal: Mutex<Option<Journal>>,
    version: watch::Sender<(usize, bool)>,
}

impl RunChannel {
    fn new(journal: Option<Journal>) -> Arc<Self> {
        Arc::new(RunChannel {
            items: Mutex::default(),
            journal: Mutex::new(journal),
            version: watch::channel((0, false)).0,
        })
    }

    fn finished(items: Vec<StreamItem>) -> Arc<Self> {
        let n = items.len();
        Arc::new(RunChannel {
            items: Mutex::new(items),
            journal: Mutex::new(None),
            version: watch::channel((n, true)).0,
        })
    }

    fn push(&self, item: StreamItem) {
        let end = matches!(item, StreamItem::Outcome { .. });
        let mut items = self.items.lock().expect("run items lock");
        if let Some(j) = self.journal.lock().expect("journal lock").as_mut() {
            if let Err(e) = j.append(&item) {
                log::error!("run journal: {e}");
            }
        }
        items.push(item);
        let n = items.len();
        self.version.send_replace((n, end));
    }

    fn stream(self: Arc<Self>) -> impl Stream<Item = StreamItem> + Send + 'static {
        let rx = self.version.subscribe();
        futures::stream::unfold((self, rx, 0usize), |(chan, mut rx, idx)| async move {
            loop {
                let (len, done) = *rx.borrow_and_update();
                if idx < len {
                    let item = chan.items.lock().expect("run items lock")[idx].clone();
                    return Some((item, (chan, rx, idx + 1)));
                }
                if done || rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }

    async fn wait(&self) {
        let mut rx = self.version.subscribe();
        let _ = rx.wait_for(|(_, done)| *done).await;
    }
}

struct RunDispatcher {
    deployment: Arc<Deployment>,
    clock: SimClock,
    chan: Arc<RunChannel>,
}

#[async_trait]
impl Dispatcher for RunDispatcher {
    fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    async fn dispatch(&self, cmd: CommandEnvelope) -> Dispatch {
        let Some((adapter, _)) = self.deployment.adapter_for(&cmd.capability_id) else {
            return Dispatch::Rejected {
                reason: "unknown_capability".into(),
                detail: format!("no adapter serves {}", cmd.capability_id),
            };
        };
        match adapter.submit(cmd).await {
            Ack::Rejected { reason, detail } => Dispatch::Rejected { reason, detail },
            Ack::Accepted(mut ticket) => loop {
                match ticket.next().await {
                    Some(event) => {
                        let kind = event.kind;
                        let detail = event.detail.clone();
                        self.chan.push(StreamItem::Event {
                            adapter_id: adapter.adapter_id().to_string(),
                            event,
                        });
                        if kind.is_terminal() {
                            return Dispatch::Finished { kind, detail };
                        }
                    }
                    None => {
                        return Dispatch::Finished {
                            kind: RunEventKind::Failed,
                            detail: "adapter stopped".into(),
                        }
                    }
                }
            },
        }
    }

    async fn wait_idle(&self, capability_id: &str, max_wait_s: f64) -> bool {
        match self.deployment.adapter_for(capability_id) {
            Some((a, machine)) => a.wait_idle(&machine, max_wait_s).await,
            None => true,
        }
    }

    fn record(&self, entry: &LogEntry) {
        self.chan.push(StreamItem::Entry { entry: entry.clone() });
    }
}

/// Adapter settings shared by deployments and simulations.
fn adapter_spec(
    config: &PlantConfig,
    controller_id: &str,
    mode: Mode,
    target: Endpoint,
    tuning: &AdapterTuning,
    retry: RetryPolicy,
) -> AdapterSpec {
    let ctrl = config
        .controller(controller_id)
        .expect("controller from the same config");
    let mut spec = AdapterSpec::new(ctrl, mode, target);
    spec.poll_interval_ms = tuning.poll_interval_ms;
    spec.snapshot_every = tuning.snapshot_every;
    spec.handshake_poll_ms = tuning.handshake_poll_ms;
    spec.retry = retry;
    spec
}

/// Runs `process` on a private virtual plant that lives only for this run.
/// Setup failures come back as a failed log.
pub async fn run_on_private_plant(
    config: &PlantConfig,
    clock: ClockOptions,
    tuning: &AdapterTuning,
    process: &BpmnProcess,
    vars: &Vars,
    run_id: &str,
) -> RunLog {
    let failed = |detail: String| {
        let mut log = RunLog::new(run_id, &process.process_id, Mode::Virtual);
        let _ = log.finish(RunOutcome::Failed, detail);
        log
    };
    let options = PlantOptions {
        clock,
        ports: PortPolicy::Ephemeral,
        ..Default::default()
    };
    let mut plant = match start_virtual_plant(config, &options).await {
        Ok(p) => p,
        Err(e) => return failed(format!("virtual plant: {e}")),
    };
    let config = Arc::new(config.clone());
    let ctx = AdapterContext {
        config: config.clone(),
        clock: plant.clock().clone(),
        events: broadcast::channel(1024).0,
        bus: TelemetryBus::new(),
        tap: None,
    };
    let specs: Vec<AdapterSpec> = plant
        .endpoints()
        .iter()
        .map(|e| {
            adapter_spec(
                &config,
                &e.controller_id,
                Mode::Virtual,
                e.endpoint.clone(),
                tuning,
                RetryPolicy::default(),
            )
        })
        .collect();
    let mut adapters = Vec::new();
    for spec in specs {
        match spawn_adapter(spec, ctx.clone()).await {
            Ok(a) => adapters.push(a),
            Err(e) => {
                plant.stop();
                return failed(e.to_string());
            }
        }
    }
    let deployment = Arc::new(Deployment {
        deployment_id: format!("{run_id}.plant"),
        plant_id: config.plant_id.clone(),
        mode: Mode::Virtual,
        config: config.clone(),
        clock: Mutex::new(Some(plant.clock().clone())),
        tap: None,
        events: ctx.events.clone(),
        created_at: now_ms(),
        state: Mutex::new(DeploymentState {
            status: DeploymentStatus::Ready,
            adapters,
            views: Vec::new(),
            endpoints: Vec::new(),
            error: None,
            plant: Some(plant),
            driver: None,
        }),
    });
    let dispatcher = RunDispatcher {
        clock: deployment.clock(),
        deployment: deployment.clone(),
        chan: RunChannel::new(None),
    };
    let log = execute(
        process,
        &dispatcher,
        vars,
        &ExecPolicy::for_config(&config),
        run_id,
        Mode::Virtual,
    )
    .await;
    deployment.stop();
    log
}

struct PlantSimulator {
    config: Arc<PlantConfig>,
    clock: ClockOptions,
    tuning: AdapterTuning,
    runs: std::sync::atomic::AtomicU32,
}

#[async_trait]
impl Simulator for PlantSimulator {
    async fn simulate(&self, scenario_id: &str, process: &BpmnProcess) -> RunLog {
        let n = self.runs.fetch_add(1, Ordering::Relaxed) + 1;
        let run_id = format!("{scenario_id}.sim{n}");
        run_on_private_plant(&self.config, self.clock, &self.tuning, process, &Vars::new(), &run_id).await
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestResult {
    pub plant_id: String,
    pub config: PlantConfig,
    pub aml_doc: String,
    pub config_doc: String,
    /// Structure findings of the AML document.
    pub findings: Vec<Finding>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessUpload {
    pub doc_id: String,
    pub process_id: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartRun {
    pub process_doc: String,
    pub vars: Vars,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateScenario {
    pub plant_id: String,
    pub goal: String,
    #[serde(default)]
    pub backend: Option<BackendKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioView {
    #[serde(flatten)]
    pub record: ScenarioRecord,
    pub allowed_actions: Vec<ActionKind>,
    pub state: ScenarioLoopState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionResult {
    pub transition: Transition,
    pub scenario: ScenarioView,
}

/// Lazily created async locks keyed by id.
#[derive(Default)]
struct KeyedLocks(Mutex<BTreeMap<String, Arc<tokio::sync::Mutex<()>>>>);

impl KeyedLocks {
    fn get(&self, key: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.0
            .lock()
            .expect("locks")
            .entry(key.to_string())
            .or_default()
            .clone()
    }
}

pub struct Orchestrator {
    cfg: ServiceConfig,
    store: DocStore,
    telemetry: Arc<TelemetryStore>,
    bus: TelemetryBus,
    deployments: Mutex<BTreeMap<String, Arc<Deployment>>>,
    runs: Mutex<BTreeMap<String, Arc<RunChannel>>>,
    plant_locks: KeyedLocks,
    scenario_locks: KeyedLocks,
    shutting_down: AtomicBool,
}

impl Orchestrator {
    /// Opens the data directory and recovers from an unclean shutdown: runs
    /// still marked running are closed as aborted.
    pub fn open(cfg: ServiceConfig) -> Result<Arc<Self>> {
        let store = DocStore::open(&cfg.data_dir)?;
        let telemetry = Arc::new(TelemetryStore::persistent(
            cfg.telemetry_capacity,
            &store.telemetry_path(),
        )?);
        let bus = TelemetryBus::new();
        bus.add_sink(telemetry.clone());
        #[cfg(feature = "mqtt")]
        if let Some(url) = &cfg.mqtt_url {
            let (host, port) =
                crate::config::parse_mqtt_url(url).map_err(|m| ServiceError::invalid("config", m, json!(null)))?;
            let bridge = crate::telemetry::mqtt::MqttBridge::start(&crate::telemetry::mqtt::MqttConfig {
                host,
                port,
                client_id: "twinloop".into(),
            });
            bus.add_sink(Arc::new(bridge));
        }
        #[cfg(not(feature = "mqtt"))]
        if cfg.mqtt_url.is_some() {
            log::warn!("mqtt_url ignored: built without the mqtt feature");
        }
        let orch = Orchestrator {
            cfg,
            store,
            telemetry,
            bus,
            deployments: Mutex::default(),
            runs: Mutex::default(),
            plant_locks: KeyedLocks::default(),
            scenario_locks: KeyedLocks::default(),
            shutting_down: AtomicBool::new(false),
        };
        orch.recover()?;
        Ok(Arc::new(orch))
    }

    fn recover(&self) -> Result<()> {
        let interrupted: Vec<RunRecord> = self
            .store
            .catalog()
            .runs
            .into_values()
            .filter(|r| r.status == RunStatus::Running)
            .collect();
        for rec in interrupted {
            let path = self.store.journal_path(&rec.run_id);
            let items: Vec<StreamItem> = if path.exists() {
                Journal::read(&path)?
            } else {
                Vec::new()
            };
            let mut log = RunLog::new(&rec.run_id, &rec.process_id, rec.mode);
            for item in &items {
                if let StreamItem::Entry { entry } = item {
                    let _ = log.push(entry.clone());
                }
            }
            let detail = "interrupted by service restart";
            let _ = log.finish(RunOutcome::Aborted, detail);
            let doc = self.store.put(DocKind::RunLog, log.to_ndjson().as_bytes())?;
            let mut journal = Journal::create(&path)?;
            journal.append(&StreamItem::Outcome {
                outcome: RunOutcome::Aborted,
                detail: detail.into(),
                run_log_doc: Some(doc.doc_id.clone()),
            })?;
            self.store.update(|c| {
                if let Some(r) = c.runs.get_mut(&rec.run_id) {
                    r.status = RunStatus::Aborted;
                    r.outcome = Some(RunOutcome::Aborted);
                    r.run_log_doc = Some(doc.doc_id.clone());
                }
            })?;
            log::warn!("run {} marked aborted", rec.run_id);
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> Catalog {
        self.store.catalog()
    }

    pub fn document(&self, doc_id: &str) -> Result<(StoredDocument, Vec<u8>)> {
        self.store.get(doc_id).map_err(|e| match e {
            StoreError::NotFound(id) => ServiceError::not_found("document", &id),
            e => e.into(),
        })
    }

    pub fn documents(&self) -> Vec<StoredDocument> {
        self.store.documents()
    }

    // ---- plants ----

    pub fn ingest_plant(&self, aml: &[u8]) -> Result<IngestResult> {
        let text = std::str::from_utf8(aml).map_err(|e| {
            ServiceError::invalid(
                "aml_encoding",
                format!("AML is not UTF-8: {e}"),
                json!({ "byte": e.valid_up_to() }),
            )
        })?;
        let doc = parse_caex(text).map_err(|e| match &e {
            AmlError::Syntax { line, column, .. } => {
                ServiceError::invalid("aml_parse", e.to_string(), json!({ "line": line, "column": column }))
            }
            AmlError::Structure { issues } => ServiceError::invalid("aml_structure", e.to_string(), json!(issues)),
        })?;
        let findings = validate_structure(&doc).findings;
        let extraction = extract_plant_config(&doc, &RoleMapping::default()).map_err(|e| {
            let errors: Vec<String> = e.0.iter().map(ToString::to_string).collect();
            ServiceError::invalid("extraction_failed", e.to_string(), json!(errors))
        })?;
        let mut config = extraction.config;
        let base = if config.plant_name.is_empty() {
            config.plant_id.clone()
        } else {
            config.plant_name.clone()
        };
        let plant_id = format!("{}-{}", slug(&base), &sha256_hex(aml)[..8]);
        config.plant_id = plant_id.clone();

        let aml_doc = self.store.put(DocKind::AmlSource, aml)?;
        let record = PlantRecord {
            plant_id: plant_id.clone(),
            plant_name: config.plant_name.clone(),
            aml_doc: aml_doc.doc_id.clone(),
            config_doc: String::new(),
            created_at: now_ms(),
        };
        let config_doc = self
            .store
            .put_with(DocKind::PlantConfig, serialize_config(&config).as_bytes(), |c| {
                c.plants.entry(plant_id.clone()).or_insert(record);
            })?;
        self.store.update(|c| {
            if let Some(r) = c.plants.get_mut(&plant_id) {
                r.config_doc = config_doc.doc_id.clone();
            }
        })?;
        Ok(IngestResult {
            plant_id,
            config,
            aml_doc: aml_doc.doc_id,
            config_doc: config_doc.doc_id,
            findings,
            warnings: extraction.warnings,
        })
    }

    pub fn plant(&self, plant_id: &str) -> Result<PlantRecord> {
        self.store
            .catalog()
            .plants
            .remove(plant_id)
            .ok_or_else(|| ServiceError::not_found("plant", plant_id))
    }

    /// The stored config document, byte for byte.
    pub fn plant_config_text(&self, plant_id: &str) -> Result<String> {
        let rec = self.plant(plant_id)?;
        Ok(self.store.get_text(&rec.config_doc)?.1)
    }

    pub fn plant_config(&self, plant_id: &str) -> Result<PlantConfig> {
        let text = self.plant_config_text(plant_id)?;
        deserialize_config(&text).map_err(|e| {
            ServiceError::Store(StoreError::Index {
                path: self.store.root().into(),
                reason: format!("plant {plant_id} config: {e}"),
            })
        })
    }

    // ---- deployments ----

    pub async fn deploy(&self, plant_id: &str, req: DeployRequest) -> Result<DeploymentView> {
        let config = Arc::new(self.plant_config(plant_id)?);
        let lock = self.plant_locks.get(plant_id);
        let _guard = lock.lock().await;
        if let Some(active) = self
            .deployments
            .lock()
            .expect("deployments lock")
            .values()
            .find(|d| d.plant_id == plant_id && d.status() != DeploymentStatus::Stopped)
        {
            return Err(ServiceError::Conflict {
                code: "deployment_active",
                message: format!(
                    "plant {plant_id} already has active deployment {}",
                    active.deployment_id
                ),
            });
        }
        let mode = req.mode.unwrap_or(Mode::Virtual);
        let seq = self.store.next_seq()?;
        let deployment_id = format!("{plant_id}.d{seq}");
        let tap = req.wire_tap.then(WireTap::default);
        let dep = Arc::new(Deployment {
            deployment_id: deployment_id.clone(),
            plant_id: plant_id.into(),
            mode,
            config: config.clone(),
            clock: Mutex::new(None),
            tap: tap.clone(),
            events: broadcast::channel(1024).0,
            created_at: now_ms(),
            state: Mutex::new(DeploymentState {
                status: DeploymentStatus::Configuring,
                adapters: Vec::new(),
                views: Vec::new(),
                endpoints: Vec::new(),
                error: None,
                plant: None,
                driver: None,
            }),
        });
        self.deployments
            .lock()
            .expect("deployments lock")
            .insert(deployment_id.clone(), dep.clone());

        let (clock, targets) = match mode {
            Mode::Virtual => {
                let options = PlantOptions {
                    clock: self.cfg.clock,
                    ports: self.cfg.ports.clone(),
                    port_overrides: self.cfg.port_overrides.clone(),
                    ..Default::default()
                };
                match start_virtual_plant(&config, &options).await {
                    Ok(plant) => {
                        let clock = plant.clock().clone();
                        let targets: Vec<(String, Endpoint)> = plant
                            .endpoints()
                            .iter()
                            .map(|e| (e.controller_id.clone(), e.endpoint.clone()))
                            .collect();
                        let mut s = dep.state.lock().expect("deployment lock");
                        s.endpoints = plant.endpoints().to_vec();
                        s.plant = Some(plant);
                        (clock, targets)
                    }
                    Err(e) => {
                        let mut s = dep.state.lock().expect("deployment lock");
                        s.status = DeploymentStatus::Stopped;
                        s.error = Some(e.to_string());
                        return Err(ServiceError::Conflict {
                            code: "plant_start_failed",
                            message: format!("deployment {deployment_id}: {e}"),
                        });
                    }
                }
            }
            Mode::Physical => {
                let clock = SimClock::new(ClockOptions::realtime(1.0));
                dep.state.lock().expect("deployment lock").driver = spawn_driver(&clock, Box::new(|_| {}));
                let targets = config
                    .controllers
                    .iter()
                    .map(|c| {
                        let ep = req.endpoints.get(&c.controller_id).unwrap_or(&c.endpoint).clone();
                        (c.controller_id.clone(), ep)
                    })
                    .collect();
                (clock, targets)
            }
        };
        *dep.clock.lock().expect("clock lock") = Some(clock.clone());

        let ctx = AdapterContext {
            config: config.clone(),
            clock,
            events: dep.events.clone(),
            bus: self.bus.clone(),
            tap,
        };
        let mut retry = self.cfg.retry();
        if let Some(n) = req.retry_attempts {
            retry.attempts = n;
        }
        let spawns = targets.iter().map(|(cid, ep)| {
            let spec = adapter_spec(&config, cid, mode, ep.clone(), &self.cfg.adapters, retry);
            let view = AdapterView {
                adapter_id: spec.adapter_id.clone(),
                controller_id: cid.clone(),
                target_endpoint: ep.clone(),
                registered: false,
                detail: None,
            };
            let ctx = ctx.clone();
            async move { (view, spawn_adapter(spec, ctx).await) }
        });
        let results = futures::future::join_all(spawns).await;
        let mut s = dep.state.lock().expect("deployment lock");
        for (mut view, res) in results {
            match res {
                Ok(handle) => {
                    view.registered = true;
                    s.adapters.push(handle);
                }
                Err(e) => view.detail = Some(e.to_string()),
            }
            s.views.push(view);
        }
        s.status = if s.views.iter().all(|v| v.registered) {
            DeploymentStatus::Ready
        } else {
            DeploymentStatus::Degraded
        };
        drop(s);
        Ok(dep.view())
    }

    pub fn deployment(&self, deployment_id: &str) -> Result<Arc<Deployment>> {
        self.deployments
            .lock()
            .expect("deployments lock")
            .get(deployment_id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found("deployment", deployment_id))
    }

    pub fn deployments(&self) -> Vec<DeploymentView> {
        self.deployments
            .lock()
            .expect("deployments lock")
            .values()
            .map(|d| d.view())
            .collect()
    }

    pub fn stop_deployment(&self, deployment_id: &str) -> Result<DeploymentView> {
        let dep = self.deployment(deployment_id)?;
        dep.stop();
        Ok(dep.view())
    }

    /// Command-channel and telemetry wire operations recorded so far.
    pub fn wire_ops(&self, deployment_id: &str) -> Result<Vec<WireOp>> {
        let dep = self.deployment(deployment_id)?;
        dep.tap.as_ref().map(WireTap::ops).ok_or_else(|| {
            ServiceError::invalid(
                "wire_tap_disabled",
                "deployment was created without wire_tap",
                json!(null),
            )
        })
    }

    // ---- processes and runs ----

    pub fn upload_process(&self, xml: &[u8]) -> Result<ProcessUpload> {
        let text = std::str::from_utf8(xml)
            .map_err(|e| ServiceError::invalid("bpmn_encoding", format!("BPMN is not UTF-8: {e}"), json!(null)))?;
        let parsed = parse_bpmn(text, ParseMode::Lenient)
            .map_err(|e| ServiceError::invalid("bpmn_parse", e.to_string(), json!(null)))?;
        let doc = self.store.put(DocKind::BpmnProcess, xml)?;
        Ok(ProcessUpload {
            doc_id: doc.doc_id,
            process_id: parsed.process.process_id,
            warnings: parsed.warnings.iter().map(ToString::to_string).collect(),
        })
    }

    fn bound_process(&self, doc_id: &str, config: &PlantConfig) -> Result<BpmnProcess> {
        let (meta, text) = self.store.get_text(doc_id).map_err(|e| match e {
            StoreError::NotFound(id) => ServiceError::not_found("process", &id),
            e => e.into(),
        })?;
        if meta.kind != DocKind::BpmnProcess {
            return Err(ServiceError::invalid(
                "not_a_process",
                format!("document {doc_id} is a {}", meta.kind.as_str()),
                json!(null),
            ));
        }
        let parsed = parse_bpmn(&text, ParseMode::Lenient)
            .map_err(|e| ServiceError::invalid("process_invalid", e.to_string(), json!([e.to_string()])))?;
        let (bound, report) = bind_process(&parsed.process, config);
        if !report.is_ok() {
            return Err(ServiceError::invalid(
                "process_invalid",
                format!(
                    "process {} does not validate against plant {}",
                    bound.process_id, config.plant_id
                ),
                json!(report.errors),
            ));
        }
        Ok(bound)
    }

    pub async fn start_run(self: &Arc<Self>, deployment_id: &str, req: StartRun) -> Result<RunRecord> {
        let dep = self.deployment(deployment_id)?;
        let status = dep.status();
        if status != DeploymentStatus::Ready {
            return Err(ServiceError::Conflict {
                code: "deployment_not_ready",
                message: format!("deployment {deployment_id} is {status:?}").to_lowercase(),
            });
        }
        let process = self.bound_process(&req.process_doc, &dep.config)?;
        let seq = self.store.next_seq()?;
        let run_id = format!("{}-r{seq}", slug(&process.process_id));
        let record = RunRecord {
            run_id: run_id.clone(),
            deployment_id: deployment_id.into(),
            plant_id: dep.plant_id.clone(),
            process_doc: req.process_doc.clone(),
            process_id: process.process_id.clone(),
            mode: dep.mode,
            status: RunStatus::Running,
            outcome: None,
            run_log_doc: None,
            started_at: now_ms(),
        };
        let journal = Journal::create(&self.store.journal_path(&run_id))?;
        self.store.update(|c| {
            c.runs.insert(run_id.clone(), record.clone());
        })?;
        let chan = RunChannel::new(Some(journal));
        chan.push(StreamItem::Run {
            run_id: run_id.clone(),
            deployment_id: deployment_id.into(),
            process_id: process.process_id.clone(),
            mode: dep.mode,
            started_at: record.started_at,
        });
        self.runs
            .lock()
            .expect("runs lock")
            .insert(run_id.clone(), chan.clone());

        let this = self.clone();
        let rid = run_id.clone();
        tokio::spawn(async move {
            let dispatcher = RunDispatcher {
                clock: dep.clock(),
                deployment: dep.clone(),
                chan: chan.clone(),
            };
            let policy = ExecPolicy::for_config(&dep.config);
            let log = execute(&process, &dispatcher, &req.vars, &policy, &rid, dep.mode).await;
            if this.shutting_down.load(Ordering::SeqCst) {
                return;
            }
            let outcome = log.outcome.unwrap_or(RunOutcome::Failed);
            let doc = match this.store.put(DocKind::RunLog, log.to_ndjson().as_bytes()) {
                Ok(d) => Some(d.doc_id),
                Err(e) => {
                    log::error!("run {rid}: storing log: {e}");
                    None
                }
            };
            let _ = this.store.update(|c| {
                if let Some(r) = c.runs.get_mut(&rid) {
                    r.status = RunStatus::Finished;
                    r.outcome = Some(outcome);
                    r.run_log_doc = doc.clone();
                }
            });
            chan.push(StreamItem::Outcome {
                outcome,
                detail: log.detail.clone(),
                run_log_doc: doc,
            });
            chan.journal.lock().expect("journal lock").take();
        });
        Ok(record)
    }

    pub fn run(&self, run_id: &str) -> Result<RunRecord> {
        self.store
            .catalog()
            .runs
            .remove(run_id)
            .ok_or_else(|| ServiceError::not_found("run", run_id))
    }

    fn run_channel(&self, run_id: &str) -> Result<Arc<RunChannel>> {
        if let Some(c) = self.runs.lock().expect("runs lock").get(run_id) {
            return Ok(c.clone());
        }
        self.run(run_id)?;
        let items = Journal::read(&self.store.journal_path(run_id))?;
        let chan = RunChannel::finished(items);
        self.runs.lock().expect("runs lock").insert(run_id.into(), chan.clone());
        Ok(chan)
    }

    /// Everything recorded so far, then live items until the outcome.
    pub fn stream_events(&self, run_id: &str) -> Result<impl Stream<Item = StreamItem> + Send + 'static> {
        Ok(self.run_channel(run_id)?.stream())
    }

    pub async fn wait_run(&self, run_id: &str) -> Result<RunRecord> {
        self.run_channel(run_id)?.wait().await;
        self.run(run_id)
    }

    pub fn run_log(&self, run_id: &str) -> Result<Option<RunLog>> {
        let rec = self.run(run_id)?;
        let Some(doc) = rec.run_log_doc else { return Ok(None) };
        let text = self.store.get_text(&doc)?.1;
        Ok(RunLog::from_ndjson(&text).ok())
    }

    // ---- scenarios ----

    pub fn create_scenario(&self, req: CreateScenario) -> Result<ScenarioView> {
        self.plant(&req.plant_id)?;
        if req.goal.trim().is_empty() {
            return Err(ServiceError::invalid(
                "empty_goal",
                "goal description is empty",
                json!(null),
            ));
        }
        let seq = self.store.next_seq()?;
        let mut stem = slug(&req.goal);
        stem.truncate(24);
        let stem = stem.trim_end_matches('_').to_string();
        let hash = sha256_hex(format!("{}\n{}\n{seq}", req.plant_id, req.goal).as_bytes());
        let scenario_id = format!("{stem}-{}", &hash[..8]);
        let state = ScenarioLoopState::new(&scenario_id, &req.goal);
        let backend = req.backend.unwrap_or(self.cfg.llm.backend);
        let body = serde_json::to_vec_pretty(&state).expect("scenario state serializes");
        let record = ScenarioRecord {
            scenario_id: scenario_id.clone(),
            plant_id: req.plant_id,
            backend,
            phase: state.phase,
            history_doc: String::new(),
            accepted_process_doc: None,
            created_at: now_ms(),
        };
        self.store.put_with(DocKind::ScenarioHistory, &body, |c| {
            let mut r = record;
            r.history_doc = format!("{}-{}", DocKind::ScenarioHistory.as_str(), &sha256_hex(&body)[..16]);
            c.scenarios.insert(scenario_id.clone(), r);
        })?;
        self.scenario(&scenario_id)
    }

    pub fn scenario(&self, scenario_id: &str) -> Result<ScenarioView> {
        let record = self
            .store
            .catalog()
            .scenarios
            .remove(scenario_id)
            .ok_or_else(|| ServiceError::not_found("scenario", scenario_id))?;
        let text = self.store.get_text(&record.history_doc)?.1;
        let state: ScenarioLoopState = serde_json::from_str(&text).map_err(|e| {
            ServiceError::Store(StoreError::Index {
                path: self.store.root().into(),
                reason: format!("scenario {scenario_id}: {e}"),
            })
        })?;
        Ok(ScenarioView {
            allowed_actions: state.allowed_actions(),
            record,
            state,
        })
    }

    /// Applies one loop action. The resulting state is stored even when the
    /// action fails, since backend failures are part of the history.
    pub async fn scenario_action(&self, scenario_id: &str, action: LoopAction) -> Result<ActionResult> {
        let lock = self.scenario_locks.get(scenario_id);
        let _guard = lock.lock().await;
        let view = self.scenario(scenario_id)?;
        let config = Arc::new(self.plant_config(&view.record.plant_id)?);
        let backend = make_backend(view.record.backend, &self.cfg.llm, &config, |k| std::env::var(k).ok());
        let simulator = PlantSimulator {
            config: config.clone(),
            clock: self.cfg.simulation_clock,
            tuning: self.cfg.adapters.clone(),
            runs: (view.state.history.iter().filter(|h| h.run_log.is_some()).count() as u32).into(),
        };
        let env = LoopEnv {
            config: &config,
            backend: backend.as_ref(),
            simulator: &simulator,
        };
        let mut state = view.state;
        let result = advance_loop(&mut state, action, &env).await;

        let accepted_xml = match (&result, state.phase) {
            (Ok(_), LoopPhase::Accepted) => state.accepted_process().and_then(|h| h.bpmn_xml.clone()),
            _ => None,
        };
        let accepted_doc = match accepted_xml {
            Some(xml) => Some(self.store.put(DocKind::BpmnProcess, xml.as_bytes())?.doc_id),
            None => None,
        };
        let body = serde_json::to_vec_pretty(&state).expect("scenario state serializes");
        let phase = state.phase;
        self.store.put_with(DocKind::ScenarioHistory, &body, |c| {
            if let Some(r) = c.scenarios.get_mut(scenario_id) {
                r.history_doc = format!("{}-{}", DocKind::ScenarioHistory.as_str(), &sha256_hex(&body)[..16]);
                r.phase = phase;
                if accepted_doc.is_some() {
                    r.accepted_process_doc = accepted_doc.clone();
                }
            }
        })?;
        let transition = result?;
        Ok(ActionResult {
            transition,
            scenario: self.scenario(scenario_id)?,
        })
    }

    // ---- telemetry ----

    pub fn query_telemetry(
        &self,
        filter: &str,
        from: Option<Millis>,
        to: Option<Millis>,
    ) -> Result<Vec<TelemetrySample>> {
        Ok(self.telemetry.query(filter, from, to)?)
    }

    pub fn telemetry_bus(&self) -> &TelemetryBus {
        &self.bus
    }

    /// Stops every deployment. Runs still executing stay `running` in the
    /// catalog and are aborted on the next open.
    pub fn shutdown(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        for d in self.deployments.lock().expect("deployments lock").values() {
            d.stop();
        }
    }
}
