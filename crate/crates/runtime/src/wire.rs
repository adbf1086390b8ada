//! Protocol clients used by the adapters, and the wire tap that records
//! what they send.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::{oneshot, Notify};
use twinloop_core::emulator::modbus::{Request, Response, ResponseError, MBAP_LEN};
use twinloop_core::emulator::RobotMessage;
use twinloop_core::plant::Endpoint;

/// Reply deadline for a single request, in wall time.
pub const IO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: std::io::Error },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Modbus(#[from] ResponseError),
    #[error("bad gateway reply: {0}")]
    Gateway(String),
}

/// Which adapter activity issued an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Command,
    Telemetry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum WireKind {
    /// `response` is the reply PDU in hex (transaction ids are
    /// connection-local), or the error text.
    Modbus { request: Request, response: String },
    /// One line sent and the direct reply, if any.
    Gateway {
        sent: serde_json::Value,
        reply: Option<serde_json::Value>,
    },
    /// An unsolicited line pushed by the gateway.
    GatewayEvent { received: serde_json::Value },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireOp {
    pub seq: u64,
    pub controller_id: String,
    pub endpoint: String,
    pub channel: Channel,
    pub op: WireKind,
}

/// Records every wire operation of the adapters it is attached to.
#[derive(Debug, Clone, Default)]
pub struct WireTap {
    ops: Arc<Mutex<Vec<WireOp>>>,
}

impl WireTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, controller_id: &str, endpoint: &str, channel: Channel, op: WireKind) {
        let mut ops = self.ops.lock().expect("tap lock");
        let seq = ops.len() as u64;
        ops.push(WireOp {
            seq,
            controller_id: controller_id.to_string(),
            endpoint: endpoint.to_string(),
            channel,
            op,
        });
    }

    pub fn ops(&self) -> Vec<WireOp> {
        self.ops.lock().expect("tap lock").clone()
    }

    pub fn clear(&self) {
        self.ops.lock().expect("tap lock").clear();
    }
}

/// Command-channel operations per controller with endpoints and gateway
/// request ids dropped, and consecutive repeats of the same operation
/// collapsed. Repeats are status polls whose count depends on timing, not on
/// the command sequence. Request ids count every line on the connection,
/// telemetry polls included, so like Modbus transaction ids they are local.
pub fn normalized_command_ops(ops: &[WireOp]) -> Vec<(String, WireKind)> {
    let mut out: Vec<(String, WireKind)> = Vec::new();
    let mut last: HashMap<&str, WireKind> = HashMap::new();
    for op in ops.iter().filter(|o| o.channel == Channel::Command) {
        let kind = without_request_ids(&op.op);
        if last.get(op.controller_id.as_str()) == Some(&kind) {
            continue;
        }
        last.insert(&op.controller_id, kind.clone());
        out.push((op.controller_id.clone(), kind));
    }
    out
}

fn without_request_ids(op: &WireKind) -> WireKind {
    let strip = |v: &serde_json::Value| {
        let mut v = v.clone();
        if let Some(m) = v.as_object_mut() {
            m.remove("request_id");
        }
        v
    };
    match op {
        WireKind::Gateway { sent, reply } => WireKind::Gateway {
            sent: strip(sent),
            reply: reply.as_ref().map(strip),
        },
        other => other.clone(),
    }
}

fn hex_pdu(adu: &[u8]) -> String {
    hex::encode(adu.get(MBAP_LEN..).unwrap_or_default())
}

/// Modbus TCP client. One request at a time; callers serialize through a lock.
#[derive(Debug)]
pub struct ModbusClient {
    stream: TcpStream,
    unit_id: u8,
    next_tid: u16,
    controller_id: String,
    endpoint: String,
    tap: Option<WireTap>,
}

impl ModbusClient {
    pub async fn connect(
        endpoint: &Endpoint,
        unit_id: u8,
        controller_id: &str,
        tap: Option<WireTap>,
    ) -> Result<Self, WireError> {
        let ep = endpoint.to_string();
        let stream = tokio::time::timeout(IO_TIMEOUT, TcpStream::connect((endpoint.host.as_str(), endpoint.port)))
            .await
            .map_err(|_| WireError::Timeout(IO_TIMEOUT))?
            .map_err(|source| WireError::Connect {
                endpoint: ep.clone(),
                source,
            })?;
        let _ = stream.set_nodelay(true);
        Ok(ModbusClient {
            stream,
            unit_id,
            next_tid: 1,
            controller_id: controller_id.to_string(),
            endpoint: ep,
            tap,
        })
    }

    async fn roundtrip(&mut self, adu: &[u8]) -> Result<Vec<u8>, WireError> {
        self.stream.write_all(adu).await?;
        let mut header = [0u8; MBAP_LEN];
        self.stream.read_exact(&mut header).await?;
        let len = u16::from_be_bytes([header[4], header[5]]) as usize;
        if len < 2 {
            return Err(WireError::Closed);
        }
        let mut frame = header.to_vec();
        frame.resize(MBAP_LEN + len - 1, 0);
        self.stream.read_exact(&mut frame[MBAP_LEN..]).await?;
        Ok(frame)
    }

    pub async fn call(&mut self, req: &Request, channel: Channel) -> Result<Response, WireError> {
        let tid = self.next_tid;
        self.next_tid = self.next_tid.wrapping_add(1);
        let adu = req.encode(tid, self.unit_id);
        let frame = tokio::time::timeout(IO_TIMEOUT, self.roundtrip(&adu))
            .await
            .map_err(|_| WireError::Timeout(IO_TIMEOUT))
            .and_then(|r| r);
        let (result, response) = match frame {
            Ok(f) => (req.decode(tid, &f).map_err(WireError::from), hex_pdu(&f)),
            Err(e) => {
                let text = e.to_string();
                (Err(e), text)
            }
        };
        if let Some(tap) = &self.tap {
            tap.record(
                &self.controller_id,
                &self.endpoint,
                channel,
                WireKind::Modbus {
                    request: req.clone(),
                    response,
                },
            );
        }
        result
    }

    pub async fn read_bits(&mut self, req: Request, channel: Channel) -> Result<Vec<bool>, WireError> {
        match self.call(&req, channel).await? {
            Response::Bits(b) => Ok(b),
            other => Err(WireError::Modbus(ResponseError::Malformed(format!(
                "expected bits, got {other:?}"
            )))),
        }
    }

    pub async fn read_registers(&mut self, req: Request, channel: Channel) -> Result<Vec<u16>, WireError> {
        match self.call(&req, channel).await? {
            Response::Registers(r) => Ok(r),
            other => Err(WireError::Modbus(ResponseError::Malformed(format!(
                "expected registers, got {other:?}"
            )))),
        }
    }
}

type Waiters = Arc<Mutex<HashMap<String, oneshot::Sender<RobotMessage>>>>;

/// Gateway client. A reader task routes replies to the caller that sent
/// the matching `request_id` and keeps pushed events until collected.
#[derive(Debug)]
pub struct GatewayClient {
    write: tokio::sync::Mutex<OwnedWriteHalf>,
    waiters: Waiters,
    events: Arc<Mutex<HashMap<String, RobotMessage>>>,
    event_ready: Arc<Notify>,
    closed: Arc<std::sync::atomic::AtomicBool>,
    reader: tokio::task::JoinHandle<()>,
    controller_id: String,
    endpoint: String,
    tap: Option<WireTap>,
}

impl Drop for GatewayClient {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

impl GatewayClient {
    pub async fn connect(endpoint: &Endpoint, controller_id: &str, tap: Option<WireTap>) -> Result<Self, WireError> {
        let ep = endpoint.to_string();
        let stream = tokio::time::timeout(IO_TIMEOUT, TcpStream::connect((endpoint.host.as_str(), endpoint.port)))
            .await
            .map_err(|_| WireError::Timeout(IO_TIMEOUT))?
            .map_err(|source| WireError::Connect {
                endpoint: ep.clone(),
                source,
            })?;
        let _ = stream.set_nodelay(true);
        let (read, write) = stream.into_split();
        let waiters: Waiters = Arc::default();
        let events: Arc<Mutex<HashMap<String, RobotMessage>>> = Arc::default();
        let event_ready = Arc::new(Notify::new());
        let closed = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let reader = {
            let (waiters, events, event_ready, closed) =
                (waiters.clone(), events.clone(), event_ready.clone(), closed.clone());
            let (tap, cid, ep) = (tap.clone(), controller_id.to_string(), ep.clone());
            tokio::spawn(async move {
                let mut lines = BufReader::new(read).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    let Ok(msg) = RobotMessage::from_line(&line) else {
                        log::warn!("{cid}: unparseable gateway line {line:?}");
                        continue;
                    };
                    match &msg {
                        RobotMessage::Event { command_id, .. } => {
                            if let Some(tap) = &tap {
                                tap.record(
                                    &cid,
                                    &ep,
                                    Channel::Command,
                                    WireKind::GatewayEvent {
                                        received: serde_json::to_value(&msg).unwrap_or_default(),
                                    },
                                );
                            }
                            events
                                .lock()
                                .expect("events lock")
                                .insert(command_id.clone(), msg.clone());
                            event_ready.notify_waiters();
                        }
                        RobotMessage::Accepted { request_id, .. }
                        | RobotMessage::Rejected { request_id, .. }
                        | RobotMessage::StatusReply { request_id, .. } => {
                            let waiter = request_id
                                .as_ref()
                                .and_then(|r| waiters.lock().expect("waiters lock").remove(r));
                            match waiter {
                                Some(w) => {
                                    let _ = w.send(msg);
                                }
                                None => log::warn!("{cid}: reply without a waiting request: {line}"),
                            }
                        }
                        _ => log::warn!("{cid}: unexpected gateway message: {line}"),
                    }
                }
                closed.store(true, std::sync::atomic::Ordering::SeqCst);
                waiters.lock().expect("waiters lock").clear();
                event_ready.notify_waiters();
            })
        };
        Ok(GatewayClient {
            write: tokio::sync::Mutex::new(write),
            waiters,
            events,
            event_ready,
            closed,
            reader,
            controller_id: controller_id.to_string(),
            endpoint: ep,
            tap,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(std::sync::atomic::Ordering::SeqCst)
    }

    /// Sends `msg` (which must carry `request_id`) and awaits its reply.
    pub async fn request(
        &self,
        request_id: &str,
        msg: RobotMessage,
        channel: Channel,
    ) -> Result<RobotMessage, WireError> {
        if self.is_closed() {
            return Err(WireError::Closed);
        }
        let (tx, rx) = oneshot::channel();
        self.waiters
            .lock()
            .expect("waiters lock")
            .insert(request_id.to_string(), tx);
        let sent = serde_json::to_value(&msg).unwrap_or_default();
        let io = async {
            self.write.lock().await.write_all(msg.to_line().as_bytes()).await?;
            rx.await.map_err(|_| WireError::Closed)
        };
        let reply = tokio::time::timeout(IO_TIMEOUT, io)
            .await
            .map_err(|_| WireError::Timeout(IO_TIMEOUT))
            .and_then(|r| r);
        if reply.is_err() {
            self.waiters.lock().expect("waiters lock").remove(request_id);
        }
        if let Some(tap) = &self.tap {
            tap.record(
                &self.controller_id,
                &self.endpoint,
                channel,
                WireKind::Gateway {
                    sent,
                    reply: reply.as_ref().ok().map(|r| serde_json::to_value(r).unwrap_or_default()),
                },
            );
        }
        reply
    }

    /// Takes the pushed event for `command_id` if it has arrived.
    pub fn take_event(&self, command_id: &str) -> Option<RobotMessage> {
        self.events.lock().expect("events lock").remove(command_id)
    }

    /// Future that resolves on the next event; create it before checking
    /// [`take_event`](Self::take_event) so no event is missed in between.
    pub fn next_event(&self) -> tokio::sync::futures::Notified<'_> {
        self.event_ready.notified()
    }
}
