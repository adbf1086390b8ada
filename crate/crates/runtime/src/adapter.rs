//! Middleware adapters: one per controller, translating capability commands
//! into wire operations and polling signals into telemetry.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, Notify};
use twinloop_core::emulator::modbus::{Request, Response, MAX_READ_BITS, MAX_READ_REGISTERS};
use twinloop_core::emulator::robot::GatewayPhase;
use twinloop_core::emulator::RobotMessage;
use twinloop_core::events::{topic, CommandEnvelope, Mode, RunEvent, RunEventKind, TelemetrySample};
use twinloop_core::plant::{
    CapabilityDescriptor, ControllerDescriptor, ControllerKind, Endpoint, GatewayField, InvocationSpec, PlantConfig,
    ProtocolAddress, ProtocolParams, SignalBinding, SignalKind, Table,
};
use twinloop_core::value::Value;

use crate::clock::SimClock;
use crate::telemetry::TelemetryBus;
use crate::wire::{Channel, GatewayClient, ModbusClient, WireError, WireTap};

pub const DEFAULT_POLL_INTERVAL_MS: u64 = 250;
pub const DEFAULT_SNAPSHOT_EVERY: u32 = 10;
pub const DEFAULT_HANDSHAKE_POLL_MS: u64 = 50;
/// Telemetry polling backs off up to this multiple of the interval.
pub const MAX_BACKOFF: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Connection attempts after the first one.
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub adapter_id: String,
    pub controller: ControllerDescriptor,
    pub mode: Mode,
    pub target_endpoint: Endpoint,
    pub poll_interval_ms: u64,
    /// A full snapshot is published on the first poll and every N polls after.
    pub snapshot_every: u32,
    pub handshake_poll_ms: u64,
    pub retry: RetryPolicy,
}

impl AdapterSpec {
    pub fn new(controller: &ControllerDescriptor, mode: Mode, target: Endpoint) -> Self {
        AdapterSpec {
            adapter_id: format!("adapter_{}", controller.controller_id),
            controller: controller.clone(),
            mode,
            target_endpoint: target,
            poll_interval_ms: DEFAULT_POLL_INTERVAL_MS,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            handshake_poll_ms: DEFAULT_HANDSHAKE_POLL_MS,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterEvent {
    pub adapter_id: String,
    pub controller_id: String,
    #[serde(flatten)]
    pub event: RunEvent,
}

/// Everything an adapter reports to and reads from.
#[derive(Clone)]
pub struct AdapterContext {
    pub config: Arc<PlantConfig>,
    pub clock: SimClock,
    pub events: broadcast::Sender<AdapterEvent>,
    pub bus: TelemetryBus,
    pub tap: Option<WireTap>,
}

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("adapter {adapter_id}: registration failed after {attempts} attempt(s): {reason}")]
    Registration {
        adapter_id: String,
        attempts: u32,
        reason: String,
    },
    #[error("adapter {0}: controller kind has no adapter")]
    Unsupported(String),
}

/// Immediate answer to a submitted command.
#[derive(Debug)]
pub enum Ack {
    Accepted(CommandTicket),
    Rejected { reason: String, detail: String },
}

impl Ack {
    fn rejected(reason: &str, detail: impl Into<String>) -> Self {
        Ack::Rejected {
            reason: reason.to_string(),
            detail: detail.into(),
        }
    }
}

/// Events of one accepted command, `accepted` first, ending with its
/// terminal event.
#[derive(Debug)]
pub struct CommandTicket {
    pub command_id: String,
    rx: mpsc::UnboundedReceiver<RunEvent>,
}

impl CommandTicket {
    pub async fn next(&mut self) -> Option<RunEvent> {
        self.rx.recv().await
    }

    /// Drains to the terminal event.
    pub async fn terminal(mut self) -> Option<RunEvent> {
        while let Some(ev) = self.rx.recv().await {
            if ev.kind.is_terminal() {
                return Some(ev);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterStatus {
    pub adapter_id: String,
    pub controller_id: String,
    pub mode: Mode,
    pub target_endpoint: Endpoint,
    pub registered: bool,
    pub polls: u64,
    /// machine_id -> command_id
    pub in_flight: BTreeMap<String, String>,
}

enum Conn {
    Modbus {
        unit_id: u8,
        client: tokio::sync::Mutex<Option<ModbusClient>>,
    },
    Gateway(tokio::sync::Mutex<Option<Arc<GatewayClient>>>),
}

struct Inner {
    spec: AdapterSpec,
    ctx: AdapterContext,
    conn: Conn,
    registered: AtomicBool,
    in_flight: Mutex<HashMap<String, String>>,
    idle: Notify,
    polls: AtomicU64,
    event_seq: AtomicU64,
    request_seq: AtomicU64,
    poller: Mutex<Option<tokio::task::JoinHandle<()>>>,
}

/// Shared handle; the adapter stops when [`stop`](Self::stop) is called.
#[derive(Clone)]
pub struct AdapterHandle {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for AdapterHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterHandle")
            .field("adapter_id", &self.inner.spec.adapter_id)
            .finish_non_exhaustive()
    }
}

/// Connects to the controller (retrying within the [`AdapterSpec`] retry budget), reports
/// `adapter_registered` and starts telemetry polling. On failure a `failed`
/// event without command id is emitted and the error returned.
pub async fn spawn_adapter(spec: AdapterSpec, ctx: AdapterContext) -> Result<AdapterHandle, AdapterError> {
    let conn = match &spec.controller.protocol_params {
        ProtocolParams::Modbus { unit_id } if spec.controller.kind == ControllerKind::ModbusPlc => Conn::Modbus {
            unit_id: *unit_id,
            client: tokio::sync::Mutex::new(None),
        },
        ProtocolParams::RobotGateway { .. } if spec.controller.kind == ControllerKind::RobotGateway => {
            Conn::Gateway(tokio::sync::Mutex::new(None))
        }
        _ => return Err(AdapterError::Unsupported(spec.adapter_id.clone())),
    };
    let a = AdapterHandle {
        inner: Arc::new(Inner {
            spec,
            ctx,
            conn,
            registered: AtomicBool::new(false),
            in_flight: Mutex::default(),
            idle: Notify::new(),
            polls: AtomicU64::new(0),
            event_seq: AtomicU64::new(0),
            request_seq: AtomicU64::new(0),
            poller: Mutex::new(None),
        }),
    };
    let retry = a.inner.spec.retry;
    let mut last_err = String::new();
    for attempt in 0..=retry.attempts {
        if attempt > 0 {
            tokio::time::sleep(Duration::from_millis(retry.backoff_ms)).await;
        }
        match a.probe().await {
            Ok(()) => {
                a.inner.registered.store(true, Ordering::SeqCst);
                let ep = &a.inner.spec.target_endpoint;
                a.emit(None, RunEventKind::AdapterRegistered, format!("connected to {ep}"));
                let poller = tokio::spawn(a.clone().poll_loop());
                *a.inner.poller.lock().expect("poller lock") = Some(poller);
                return Ok(a);
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    let detail = format!("registration failed: {last_err}");
    a.emit(None, RunEventKind::Failed, detail);
    Err(AdapterError::Registration {
        adapter_id: a.inner.spec.adapter_id.clone(),
        attempts: retry.attempts + 1,
        reason: last_err,
    })
}

/// Contiguous span covering `addrs`, split to respect per-request limits.
fn read_spans(table: Table, addrs: &[u16]) -> Vec<Request> {
    let (Some(&lo), Some(&hi)) = (addrs.iter().min(), addrs.iter().max()) else {
        return Vec::new();
    };
    let limit = match table {
        Table::Coil | Table::DiscreteInput => MAX_READ_BITS,
        Table::HoldingRegister | Table::InputRegister => MAX_READ_REGISTERS,
    } as u32;
    let mut out = Vec::new();
    let mut start = lo as u32;
    while start <= hi as u32 {
        let quantity = (hi as u32 - start + 1).min(limit) as u16;
        let address = start as u16;
        out.push(match table {
            Table::Coil => Request::ReadCoils { address, quantity },
            Table::DiscreteInput => Request::ReadDiscreteInputs { address, quantity },
            Table::HoldingRegister => Request::ReadHoldingRegisters { address, quantity },
            Table::InputRegister => Request::ReadInputRegisters { address, quantity },
        });
        start += quantity as u32;
    }
    out
}

fn start_of(req: &Request) -> u16 {
    match req {
        Request::ReadCoils { address, .. }
        | Request::ReadDiscreteInputs { address, .. }
        | Request::ReadHoldingRegisters { address, .. }
        | Request::ReadInputRegisters { address, .. } => *address,
        _ => 0,
    }
}

/// Register value for a parameter.
fn encode_param(spec: &twinloop_core::plant::ParamSpec, v: &Value) -> Result<u16, String> {
    match v {
        Value::Int(i) => {
            u16::try_from(*i).map_err(|_| format!("parameter {} = {i} does not fit a register", spec.name))
        }
        Value::Bool(b) => Ok(u16::from(*b)),
        Value::Text(t) => spec
            .choices
            .as_ref()
            .and_then(|c| c.iter().position(|x| x == t))
            .map(|i| i as u16)
            .ok_or_else(|| format!("parameter {} = {t:?} has no register encoding", spec.name)),
    }
}

/// Declared parameters with defaults filled in, each checked against its spec.
fn resolve_params(cap: &CapabilityDescriptor, given: &BTreeMap<String, Value>) -> Result<Vec<(String, Value)>, String> {
    if let Some(unknown) = given.keys().find(|k| !cap.params.iter().any(|p| &p.name == *k)) {
        return Err(format!("unknown parameter {unknown}"));
    }
    cap.params
        .iter()
        .map(|p| {
            let v = given
                .get(&p.name)
                .or(p.default.as_ref())
                .cloned()
                .ok_or_else(|| format!("missing parameter {}", p.name))?;
            p.check(&v)?;
            Ok((p.name.clone(), v))
        })
        .collect()
}

struct StatusBits {
    busy: bool,
    done: bool,
    error: bool,
}

impl AdapterHandle {
    pub fn adapter_id(&self) -> &str {
        &self.inner.spec.adapter_id
    }

    pub fn controller_id(&self) -> &str {
        &self.inner.spec.controller.controller_id
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.inner.spec
    }

    pub fn polls(&self) -> u64 {
        self.inner.polls.load(Ordering::SeqCst)
    }

    pub fn status(&self) -> AdapterStatus {
        let s = &self.inner.spec;
        AdapterStatus {
            adapter_id: s.adapter_id.clone(),
            controller_id: s.controller.controller_id.clone(),
            mode: s.mode,
            target_endpoint: s.target_endpoint.clone(),
            registered: self.inner.registered.load(Ordering::SeqCst),
            polls: self.polls(),
            in_flight: self
                .inner
                .in_flight
                .lock()
                .expect("in-flight lock")
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn stop(&self) {
        if let Some(p) = self.inner.poller.lock().expect("poller lock").take() {
            p.abort();
        }
        self.inner.registered.store(false, Ordering::SeqCst);
    }

    fn emit(&self, command_id: Option<&str>, kind: RunEventKind, detail: impl Into<String>) -> RunEvent {
        let n = self.inner.event_seq.fetch_add(1, Ordering::SeqCst) + 1;
        let ev = RunEvent {
            event_id: format!("{}.{n}", self.inner.spec.adapter_id),
            command_id: command_id.map(str::to_string),
            kind,
            detail: detail.into(),
            at: self.inner.ctx.clock.now_ms(),
        };
        // Nobody listening is fine.
        let _ = self.inner.ctx.events.send(AdapterEvent {
            adapter_id: self.inner.spec.adapter_id.clone(),
            controller_id: self.inner.spec.controller.controller_id.clone(),
            event: ev.clone(),
        });
        ev
    }

    fn next_request_id(&self, prefix: char) -> String {
        format!("{prefix}{}", self.inner.request_seq.fetch_add(1, Ordering::SeqCst) + 1)
    }

    async fn modbus_call(&self, req: &Request, channel: Channel) -> Result<Response, WireError> {
        let Conn::Modbus { unit_id, client } = &self.inner.conn else {
            unreachable!("modbus call on a gateway adapter")
        };
        let mut guard = client.lock().await;
        if guard.is_none() {
            let s = &self.inner.spec;
            *guard = Some(
                ModbusClient::connect(
                    &s.target_endpoint,
                    *unit_id,
                    &s.controller.controller_id,
                    self.inner.ctx.tap.clone(),
                )
                .await?,
            );
        }
        let result = guard.as_mut().expect("connected").call(req, channel).await;
        if matches!(result, Err(ref e) if !matches!(e, WireError::Modbus(_))) {
            // Stream state is unknown after an I/O failure; reconnect next time.
            *guard = None;
        }
        result
    }

    async fn gateway(&self) -> Result<Arc<GatewayClient>, WireError> {
        let Conn::Gateway(slot) = &self.inner.conn else {
            unreachable!("gateway call on a modbus adapter")
        };
        let mut guard = slot.lock().await;
        if let Some(c) = guard.as_ref().filter(|c| !c.is_closed()) {
            return Ok(c.clone());
        }
        let s = &self.inner.spec;
        let c = Arc::new(
            GatewayClient::connect(
                &s.target_endpoint,
                &s.controller.controller_id,
                self.inner.ctx.tap.clone(),
            )
            .await?,
        );
        *guard = Some(c.clone());
        Ok(c)
    }

    async fn gateway_status(&self) -> Result<(GatewayPhase, i64), WireError> {
        let id = self.next_request_id('s');
        let reply = self
            .gateway()
            .await?
            .request(
                &id,
                RobotMessage::Status {
                    request_id: Some(id.clone()),
                },
                Channel::Telemetry,
            )
            .await?;
        match reply {
            RobotMessage::StatusReply {
                phase, position_index, ..
            } => Ok((phase, position_index)),
            other => Err(WireError::Gateway(format!("expected status_reply, got {other:?}"))),
        }
    }

    /// Verifies the controller answers its protocol.
    async fn probe(&self) -> Result<(), WireError> {
        match &self.inner.conn {
            Conn::Modbus { .. } => self
                .modbus_call(
                    &Request::ReadDiscreteInputs {
                        address: 0,
                        quantity: 1,
                    },
                    Channel::Telemetry,
                )
                .await
                .map(drop),
            Conn::Gateway(_) => self.gateway_status().await.map(drop),
        }
    }

    fn release(&self, machine_id: &str) {
        self.inner.in_flight.lock().expect("in-flight lock").remove(machine_id);
        self.inner.idle.notify_waiters();
    }

    /// Waits until no command of this adapter runs on `machine_id`. False if
    /// still busy after `max_wait_s` simulated seconds.
    pub async fn wait_idle(&self, machine_id: &str, max_wait_s: f64) -> bool {
        let clock = &self.inner.ctx.clock;
        let deadline = clock.now_us() + (max_wait_s * 1e6) as u64;
        loop {
            let notified = self.inner.idle.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if !self
                .inner
                .in_flight
                .lock()
                .expect("in-flight lock")
                .contains_key(machine_id)
            {
                return true;
            }
            if clock.now_us() >= deadline {
                return false;
            }
            tokio::select! {
                _ = notified => {}
                _ = clock.sleep_until_us(deadline) => {}
            }
        }
    }

    /// Submits a command. Acceptance means the controller took it; the
    /// ticket then yields its lifecycle events.
    pub async fn submit(&self, cmd: CommandEnvelope) -> Ack {
        let config = self.inner.ctx.config.clone();
        let Some(cap) = config.capability(&cmd.capability_id) else {
            return Ack::rejected("unknown_capability", format!("no capability {}", cmd.capability_id));
        };
        if cap.controller_id != self.controller_id() {
            return Ack::rejected(
                "wrong_adapter",
                format!("{} belongs to controller {}", cap.capability_id, cap.controller_id),
            );
        }
        if !self.inner.registered.load(Ordering::SeqCst) {
            return Ack::rejected(
                "not_registered",
                format!("adapter {} is not registered", self.adapter_id()),
            );
        }
        let params = match resolve_params(cap, &cmd.params) {
            Ok(p) => p,
            Err(e) => return Ack::rejected("invalid_params", e),
        };
        {
            let mut busy = self.inner.in_flight.lock().expect("in-flight lock");
            if let Some(other) = busy.get(&cap.machine_id) {
                return Ack::rejected("busy", format!("command {other} is running on {}", cap.machine_id));
            }
            busy.insert(cap.machine_id.clone(), cmd.command_id.clone());
        }
        let ack = match &cap.invocation {
            InvocationSpec::Modbus { .. } => self.start_modbus(cap.clone(), &cmd, params).await,
            InvocationSpec::Robot { command, .. } => self.start_robot(cap.clone(), command.clone(), &cmd, params).await,
        };
        if matches!(ack, Ack::Rejected { .. }) {
            self.release(&cap.machine_id);
        }
        ack
    }

    fn status_request(
        busy: ProtocolAddress,
        done: ProtocolAddress,
        error: Option<ProtocolAddress>,
    ) -> (Request, [u16; 3]) {
        let addrs = [busy.address, done.address, error.map_or(busy.address, |e| e.address)];
        let lo = *addrs.iter().min().expect("three");
        let hi = *addrs.iter().max().expect("three");
        (
            Request::ReadDiscreteInputs {
                address: lo,
                quantity: hi - lo + 1,
            },
            addrs.map(|a| a - lo),
        )
    }

    async fn read_status(&self, req: &Request, idx: [u16; 3], has_error: bool) -> Result<StatusBits, WireError> {
        match self.modbus_call(req, Channel::Command).await? {
            Response::Bits(b) => Ok(StatusBits {
                busy: b[idx[0] as usize],
                done: b[idx[1] as usize],
                error: has_error && b[idx[2] as usize],
            }),
            other => Err(WireError::Gateway(format!("unexpected reply {other:?}"))),
        }
    }

    async fn start_modbus(
        &self,
        cap: CapabilityDescriptor,
        cmd: &CommandEnvelope,
        params: Vec<(String, Value)>,
    ) -> Ack {
        let InvocationSpec::Modbus {
            trigger,
            param_registers,
            busy,
            done,
            error,
        } = cap.invocation.clone()
        else {
            unreachable!()
        };
        let mut writes = Vec::new();
        for ((name, v), reg) in params.iter().zip(&param_registers) {
            let spec = cap.params.iter().find(|p| &p.name == name).expect("resolved");
            match encode_param(spec, v) {
                Ok(x) => writes.push((reg.address, x)),
                Err(e) => return Ack::rejected("invalid_params", e),
            }
        }
        let (status_req, idx) = Self::status_request(busy, done, error);
        match self.read_status(&status_req, idx, error.is_some()).await {
            Ok(s) if s.busy => return Ack::rejected("busy", format!("{} reports busy", cap.machine_id)),
            Ok(_) => {}
            Err(e) => return Ack::rejected("wire_error", e.to_string()),
        }
        let (tx, rx) = mpsc::unbounded_channel();
        let send = {
            let (me, tx, id) = (self.clone(), tx.clone(), cmd.command_id.clone());
            move |kind, detail: String| {
                let _ = tx.send(me.emit(Some(&id), kind, detail));
            }
        };
        send(RunEventKind::Accepted, cap.capability_id.clone());
        let me = self.clone();
        let timeout_s = cmd.timeout_s;
        tokio::spawn(async move {
            let clock = me.inner.ctx.clock.clone();
            let deadline = clock.now_us() + (timeout_s.max(0.0) * 1e6) as u64;
            let poll_s = me.inner.spec.handshake_poll_ms as f64 / 1000.0;
            let terminal = async {
                for (reg, v) in contiguous_runs(&writes) {
                    let req = if v.len() == 1 {
                        Request::WriteSingleRegister {
                            address: reg,
                            value: v[0],
                        }
                    } else {
                        Request::WriteMultipleRegisters {
                            address: reg,
                            values: v,
                        }
                    };
                    me.modbus_call(&req, Channel::Command).await?;
                }
                let set = |value| Request::WriteSingleCoil {
                    address: trigger.address,
                    value,
                };
                me.modbus_call(&set(true), Channel::Command).await?;
                let mut started = false;
                loop {
                    let s = me.read_status(&status_req, idx, error.is_some()).await?;
                    if (s.busy || s.done) && !started {
                        started = true;
                        send(RunEventKind::Started, String::new());
                    }
                    if s.done {
                        me.modbus_call(&set(false), Channel::Command).await?;
                        return Ok((RunEventKind::Completed, String::new()));
                    }
                    if s.error {
                        me.modbus_call(&set(false), Channel::Command).await?;
                        return Ok((RunEventKind::Failed, "controller reported an error".to_string()));
                    }
                    let now = clock.now_us();
                    if now >= deadline {
                        me.modbus_call(&set(false), Channel::Command).await?;
                        return Ok((RunEventKind::Timeout, format!("no completion within {timeout_s} s")));
                    }
                    clock
                        .sleep_until_us(deadline.min(now + (poll_s * 1e6).max(1.0) as u64))
                        .await;
                }
            };
            let (kind, detail) = terminal
                .await
                .unwrap_or_else(|e: WireError| (RunEventKind::Failed, format!("wire error: {e}")));
            send(kind, detail);
            me.release(&cap.machine_id);
        });
        Ack::Accepted(CommandTicket {
            command_id: cmd.command_id.clone(),
            rx,
        })
    }

    async fn start_robot(
        &self,
        cap: CapabilityDescriptor,
        command: String,
        cmd: &CommandEnvelope,
        params: Vec<(String, Value)>,
    ) -> Ack {
        let client = match self.gateway().await {
            Ok(c) => c,
            Err(e) => return Ack::rejected("wire_error", e.to_string()),
        };
        let request_id = self.next_request_id('c');
        let msg = RobotMessage::Cmd {
            request_id: Some(request_id.clone()),
            command,
            params: params.into_iter().collect(),
        };
        let gw_id = match client.request(&request_id, msg, Channel::Command).await {
            Ok(RobotMessage::Accepted { command_id, .. }) => command_id,
            Ok(RobotMessage::Rejected { reason, detail, .. }) => {
                let reason = serde_json::to_value(reason)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string));
                return Ack::rejected(reason.as_deref().unwrap_or("rejected"), detail);
            }
            Ok(other) => return Ack::rejected("wire_error", format!("unexpected reply {other:?}")),
            Err(e) => return Ack::rejected("wire_error", e.to_string()),
        };
        let (tx, rx) = mpsc::unbounded_channel();
        let send = {
            let (me, id) = (self.clone(), cmd.command_id.clone());
            move |kind, detail: String| {
                let _ = tx.send(me.emit(Some(&id), kind, detail));
            }
        };
        send(RunEventKind::Accepted, cap.capability_id.clone());
        // The gateway starts executing as soon as it accepts.
        send(RunEventKind::Started, gw_id.clone());
        let me = self.clone();
        let timeout_s = cmd.timeout_s;
        tokio::spawn(async move {
            let clock = me.inner.ctx.clock.clone();
            let deadline = clock.now_us() + (timeout_s.max(0.0) * 1e6) as u64;
            let (kind, detail) = loop {
                let next = client.next_event();
                tokio::pin!(next);
                next.as_mut().enable();
                match client.take_event(&gw_id) {
                    Some(RobotMessage::Event { event, position, .. }) => match event {
                        twinloop_core::emulator::robot::RobotEvent::Completed => {
                            break (RunEventKind::Completed, format!("at {position}"))
                        }
                        twinloop_core::emulator::robot::RobotEvent::Failed => {
                            break (RunEventKind::Failed, format!("gateway reported failure at {position}"))
                        }
                    },
                    Some(_) => unreachable!("only events are stored"),
                    None => {}
                }
                if client.is_closed() {
                    break (RunEventKind::Failed, "wire error: gateway connection lost".to_string());
                }
                if clock.now_us() >= deadline {
                    break (RunEventKind::Timeout, format!("no completion within {timeout_s} s"));
                }
                tokio::select! {
                    _ = next => {}
                    _ = clock.sleep_until_us(deadline) => {}
                }
            };
            send(kind, detail);
            me.release(&cap.machine_id);
        });
        Ack::Accepted(CommandTicket {
            command_id: cmd.command_id.clone(),
            rx,
        })
    }

    /// Reads every signal of the controller's machines once.
    pub async fn sample_signals(&self) -> Result<Vec<TelemetrySample>, WireError> {
        let config = self.inner.ctx.config.clone();
        let cid = self.controller_id();
        let at = self.inner.ctx.clock.now_ms();
        let signals: Vec<_> = config
            .machines_of_controller(cid)
            .flat_map(|m| m.signals.iter().map(move |s| (m, s)))
            .collect();
        let mut out = Vec::with_capacity(signals.len());
        match &self.inner.conn {
            Conn::Modbus { .. } => {
                let mut by_table: BTreeMap<Table, Vec<u16>> = BTreeMap::new();
                for (_, s) in &signals {
                    if let SignalBinding::Modbus(a) = &s.binding {
                        by_table.entry(a.table).or_default().push(a.address);
                    }
                }
                let mut values: HashMap<ProtocolAddress, u16> = HashMap::new();
                for (table, addrs) in by_table {
                    for req in read_spans(table, &addrs) {
                        let base = start_of(&req);
                        match self.modbus_call(&req, Channel::Telemetry).await? {
                            Response::Bits(b) => values.extend(
                                b.iter()
                                    .enumerate()
                                    .map(|(i, &x)| (ProtocolAddress::new(table, base + i as u16), u16::from(x))),
                            ),
                            Response::Registers(r) => values.extend(
                                r.iter()
                                    .enumerate()
                                    .map(|(i, &x)| (ProtocolAddress::new(table, base + i as u16), x)),
                            ),
                            Response::Written => {}
                        }
                    }
                }
                for (m, s) in &signals {
                    if let SignalBinding::Modbus(a) = &s.binding {
                        let raw = values.get(a).copied().unwrap_or(0);
                        let value = match s.data_kind {
                            SignalKind::Boolean => Value::Bool(raw != 0),
                            SignalKind::Integer => Value::Int(raw as i64),
                        };
                        out.push(TelemetrySample {
                            topic: topic(&config.plant_id, &m.machine_id, &s.name),
                            value,
                            at,
                        });
                    }
                }
            }
            Conn::Gateway(_) => {
                let (phase, index) = self.gateway_status().await?;
                for (m, s) in &signals {
                    let value = match s.binding {
                        SignalBinding::Gateway(GatewayField::Busy) => Value::Bool(phase == GatewayPhase::Busy),
                        SignalBinding::Gateway(GatewayField::PositionIndex) => Value::Int(index),
                        SignalBinding::Modbus(_) => continue,
                    };
                    out.push(TelemetrySample {
                        topic: topic(&config.plant_id, &m.machine_id, &s.name),
                        value,
                        at,
                    });
                }
            }
        }
        Ok(out)
    }

    async fn poll_loop(self) {
        let clock = self.inner.ctx.clock.clone();
        let interval_s = self.inner.spec.poll_interval_ms.max(1) as f64 / 1000.0;
        let every = self.inner.spec.snapshot_every.max(1) as u64;
        let mut last: HashMap<String, Value> = HashMap::new();
        let mut backoff = 1u32;
        loop {
            clock.sleep(interval_s * backoff as f64).await;
            match self.sample_signals().await {
                Ok(samples) => {
                    backoff = 1;
                    let n = self.inner.polls.fetch_add(1, Ordering::SeqCst);
                    let snapshot = n.is_multiple_of(every);
                    for s in samples {
                        let changed = last.get(&s.topic) != Some(&s.value);
                        if changed {
                            last.insert(s.topic.clone(), s.value.clone());
                        }
                        if changed || snapshot {
                            self.inner.ctx.bus.publish(s);
                        }
                    }
                }
                Err(e) => {
                    backoff = (backoff * 2).min(MAX_BACKOFF);
                    self.emit(None, RunEventKind::Failed, format!("telemetry read failed: {e}"));
                }
            }
        }
    }
}

/// Groups `(address, value)` writes into runs of consecutive addresses.
fn contiguous_runs(writes: &[(u16, u16)]) -> Vec<(u16, Vec<u16>)> {
    let mut sorted = writes.to_vec();
    sorted.sort_by_key(|w| w.0);
    let mut out: Vec<(u16, Vec<u16>)> = Vec::new();
    for (a, v) in sorted {
        match out.last_mut() {
            Some((start, vals)) if *start as usize + vals.len() == a as usize => vals.push(v),
            _ => out.push((a, vec![v])),
        }
    }
    out
}
