//! Network hosting for the emulated controllers.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio::task::{JoinHandle, JoinSet};
use twinloop_core::emulator::modbus::MBAP_LEN;
use twinloop_core::emulator::robot::RejectReason;
use twinloop_core::emulator::{PlcEmulator, PlcState, RobotGatewayState, RobotMessage};
use twinloop_core::plant::{ControllerKind, Endpoint, PlantConfig};

use crate::clock::{spawn_driver, ClockOptions, SimClock};

pub const DEFAULT_MODBUS_PORT: u16 = 1502;
pub const DEFAULT_GATEWAY_PORT: u16 = 1600;
const EVENT_BACKLOG: usize = 256;

/// How listener ports are chosen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortPolicy {
    /// The port in each controller's endpoint.
    #[default]
    Configured,
    /// 1502+i for the i-th Modbus controller, 1600+i for the i-th gateway.
    Defaults,
    /// Let the OS pick.
    Ephemeral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantOptions {
    pub clock: ClockOptions,
    pub ports: PortPolicy,
    /// Per-controller port overrides, applied after the policy.
    pub port_overrides: BTreeMap<String, u16>,
    pub bind_host: String,
}

impl Default for PlantOptions {
    fn default() -> Self {
        PlantOptions {
            clock: ClockOptions::default(),
            ports: PortPolicy::Configured,
            port_overrides: BTreeMap::new(),
            bind_host: "127.0.0.1".into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("controller {controller_id}: cannot listen on {addr}: {source}")]
    Bind {
        controller_id: String,
        addr: String,
        source: std::io::Error,
    },
    #[error("controller {0}: no emulator for this controller")]
    NoEmulator(String),
    #[error("invalid clock options: {0}")]
    Clock(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantEndpoint {
    pub controller_id: String,
    pub kind: ControllerKind,
    pub endpoint: Endpoint,
}

enum Core {
    Plc(Arc<Mutex<PlcEmulator>>),
    Robot {
        state: Arc<Mutex<RobotGatewayState>>,
        events: broadcast::Sender<RobotMessage>,
    },
}

/// A running virtual plant. Dropping the handle stops it.
pub struct PlantHandle {
    clock: SimClock,
    endpoints: Vec<PlantEndpoint>,
    plcs: BTreeMap<String, Arc<Mutex<PlcEmulator>>>,
    robots: BTreeMap<String, (Arc<Mutex<RobotGatewayState>>, broadcast::Sender<RobotMessage>)>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for PlantHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantHandle")
            .field("endpoints", &self.endpoints)
            .finish_non_exhaustive()
    }
}

fn step_all(
    plcs: &BTreeMap<String, Arc<Mutex<PlcEmulator>>>,
    robots: &BTreeMap<String, (Arc<Mutex<RobotGatewayState>>, broadcast::Sender<RobotMessage>)>,
    dt_s: f64,
) {
    for p in plcs.values() {
        p.lock().expect("plc lock").step(dt_s);
    }
    for (state, events) in robots.values() {
        if let Some(ev) = state.lock().expect("gateway lock").step(dt_s) {
            // No subscriber simply means no client is connected.
            let _ = events.send(ev);
        }
    }
}

/// Starts one listener per controller and the clock driver.
pub async fn start_virtual_plant(config: &PlantConfig, options: &PlantOptions) -> Result<PlantHandle, PlantError> {
    options.clock.check().map_err(PlantError::Clock)?;
    let clock = SimClock::new(options.clock);
    let mut listeners = Vec::new();
    let (mut n_plc, mut n_gw) = (0u16, 0u16);
    for c in &config.controllers {
        let default = match c.kind {
            ControllerKind::ModbusPlc => {
                n_plc += 1;
                DEFAULT_MODBUS_PORT + n_plc - 1
            }
            ControllerKind::RobotGateway => {
                n_gw += 1;
                DEFAULT_GATEWAY_PORT + n_gw - 1
            }
        };
        let port = match options.ports {
            PortPolicy::Configured => c.endpoint.port,
            PortPolicy::Defaults => default,
            PortPolicy::Ephemeral => 0,
        };
        let port = options.port_overrides.get(&c.controller_id).copied().unwrap_or(port);
        let addr = format!("{}:{port}", options.bind_host);
        let listener = TcpListener::bind(&addr).await.map_err(|source| PlantError::Bind {
            controller_id: c.controller_id.clone(),
            addr: addr.clone(),
            source,
        })?;
        let local: SocketAddr = listener.local_addr().map_err(|source| PlantError::Bind {
            controller_id: c.controller_id.clone(),
            addr,
            source,
        })?;
        let core = match c.kind {
            ControllerKind::ModbusPlc => Core::Plc(Arc::new(Mutex::new(
                PlcEmulator::from_config(config, &c.controller_id)
                    .ok_or_else(|| PlantError::NoEmulator(c.controller_id.clone()))?,
            ))),
            ControllerKind::RobotGateway => Core::Robot {
                state: Arc::new(Mutex::new(
                    RobotGatewayState::from_config(config, c)
                        .ok_or_else(|| PlantError::NoEmulator(c.controller_id.clone()))?,
                )),
                events: broadcast::channel(EVENT_BACKLOG).0,
            },
        };
        let endpoint = PlantEndpoint {
            controller_id: c.controller_id.clone(),
            kind: c.kind,
            endpoint: Endpoint {
                host: local.ip().to_string(),
                port: local.port(),
            },
        };
        listeners.push((listener, core, endpoint));
    }

    let mut handle = PlantHandle {
        clock: clock.clone(),
        endpoints: Vec::new(),
        plcs: BTreeMap::new(),
        robots: BTreeMap::new(),
        tasks: Vec::new(),
    };
    for (listener, core, endpoint) in listeners {
        let id = endpoint.controller_id.clone();
        let task = match core {
            Core::Plc(plc) => {
                handle.plcs.insert(id.clone(), plc.clone());
                tokio::spawn(accept_loop(listener, id, move |s| serve_modbus(s, plc.clone())))
            }
            Core::Robot { state, events } => {
                handle.robots.insert(id.clone(), (state.clone(), events.clone()));
                tokio::spawn(accept_loop(listener, id, move |s| {
                    serve_gateway(s, state.clone(), events.subscribe())
                }))
            }
        };
        handle.tasks.push(task);
        handle.endpoints.push(endpoint);
    }
    let (plcs, robots) = (handle.plcs.clone(), handle.robots.clone());
    if let Some(driver) = spawn_driver(&clock, Box::new(move |dt| step_all(&plcs, &robots, dt))) {
        handle.tasks.push(driver);
    }
    Ok(handle)
}

async fn accept_loop<F, Fut>(listener: TcpListener, controller_id: String, serve: F)
where
    F: Fn(TcpStream) -> Fut,
    Fut: std::future::Future<Output = std::io::Result<()>> + Send + 'static,
{
    // Connection tasks die with this set when the listener task is aborted.
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    let id = controller_id.clone();
                    let fut = serve(stream);
                    conns.spawn(async move {
                        if let Err(e) = fut.await {
                            log::debug!("{id}: connection from {peer} closed: {e}");
                        }
                    });
                }
                Err(e) => {
                    log::warn!("{controller_id}: accept failed: {e}");
                    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                }
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

/// Serves MBAP frames until the peer closes or sends a bad frame.
async fn serve_modbus(mut stream: TcpStream, plc: Arc<Mutex<PlcEmulator>>) -> std::io::Result<()> {
    let mut header = [0u8; MBAP_LEN];
    loop {
        match stream.read_exact(&mut header).await {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        let len = u16::from_be_bytes([header[4], header[5]]) as usize;
        if !(2..=254).contains(&len) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("MBAP length {len}"),
            ));
        }
        let mut frame = header.to_vec();
        frame.resize(MBAP_LEN + len - 1, 0);
        stream.read_exact(&mut frame[MBAP_LEN..]).await?;
        let reply = plc.lock().expect("plc lock").handle_adu(&frame);
        match reply {
            Ok(bytes) => stream.write_all(&bytes).await?,
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())),
        }
    }
}

/// Line-oriented gateway session. Completion events go to every connection.
async fn serve_gateway(
    stream: TcpStream,
    state: Arc<Mutex<RobotGatewayState>>,
    mut events: broadcast::Receiver<RobotMessage>,
) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    loop {
        tokio::select! {
            line = lines.next_line() => {
                let Some(line) = line? else { return Ok(()) };
                if line.trim().is_empty() {
                    continue;
                }
                let reply = match RobotMessage::from_line(&line) {
                    Ok(msg) => state.lock().expect("gateway lock").handle(msg),
                    Err(e) => RobotMessage::Rejected {
                        request_id: None,
                        reason: RejectReason::Malformed,
                        detail: e.to_string(),
                    },
                };
                write.write_all(reply.to_line().as_bytes()).await?;
            }
            ev = events.recv() => match ev {
                Ok(ev) => write.write_all(ev.to_line().as_bytes()).await?,
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("gateway client lagged by {n} events"),
                Err(broadcast::error::RecvError::Closed) => return Ok(()),
            },
        }
    }
}

impl PlantHandle {
    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn endpoints(&self) -> &[PlantEndpoint] {
        &self.endpoints
    }

    pub fn endpoint(&self, controller_id: &str) -> Option<&Endpoint> {
        self.endpoints
            .iter()
            .find(|e| e.controller_id == controller_id)
            .map(|e| &e.endpoint)
    }

    /// `config` with every controller endpoint replaced by the bound one.
    pub fn rebind(&self, config: &PlantConfig) -> PlantConfig {
        let mut c = config.clone();
        for ctrl in &mut c.controllers {
            if let Some(e) = self.endpoint(&ctrl.controller_id) {
                ctrl.endpoint = e.clone();
            }
        }
        c
    }

    /// Steps every emulator by `dt_s` and advances the clock.
    pub fn step(&self, dt_s: f64) {
        step_all(&self.plcs, &self.robots, dt_s);
        self.clock.advance(dt_s);
    }

    pub fn plc_state(&self, controller_id: &str) -> Option<PlcState> {
        self.plcs
            .get(controller_id)
            .map(|p| p.lock().expect("plc lock").plc.clone())
    }

    /// Runs `f` on a controller's emulator, e.g. to inject faults.
    pub fn with_plc<R>(&self, controller_id: &str, f: impl FnOnce(&mut PlcEmulator) -> R) -> Option<R> {
        self.plcs
            .get(controller_id)
            .map(|p| f(&mut p.lock().expect("plc lock")))
    }

    pub fn gateway_state(&self, controller_id: &str) -> Option<RobotGatewayState> {
        self.robots
            .get(controller_id)
            .map(|(s, _)| s.lock().expect("gateway lock").clone())
    }

    pub fn stop(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for PlantHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
