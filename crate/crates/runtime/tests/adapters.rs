mod support;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use support::*;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use twinloop_core::emulator::RobotMessage;
use twinloop_core::events::{CommandEnvelope, EventOrder, Mode, RunEventKind, TelemetrySample, TopicFilter};
use twinloop_core::plant::{ControllerKind, PlantConfig};
use twinloop_core::value::Value;
use twinloop_runtime::adapter::{spawn_adapter, Ack, AdapterHandle, AdapterSpec, RetryPolicy};
use twinloop_runtime::clock::{ClockOptions, SimClock};
use twinloop_runtime::plant::{start_virtual_plant, PlantError, PlantHandle, PlantOptions, PortPolicy};
use twinloop_runtime::telemetry::{TelemetrySink, TelemetryStore};

fn opts(clock: ClockOptions) -> PlantOptions {
    PlantOptions {
        clock,
        ports: PortPolicy::Ephemeral,
        ..Default::default()
    }
}

fn cmd(id: &str, cap: &str, params: &[(&str, Value)], timeout_s: f64) -> CommandEnvelope {
    CommandEnvelope {
        command_id: id.into(),
        capability_id: cap.into(),
        params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        issued_at: 0,
        timeout_s,
    }
}

async fn adapter_for(
    plant: &PlantHandle,
    config: &PlantConfig,
    controller_id: &str,
    ctx: &twinloop_runtime::adapter::AdapterContext,
) -> AdapterHandle {
    let ctrl = config.controller(controller_id).unwrap();
    let spec = AdapterSpec::new(ctrl, Mode::Virtual, plant.endpoint(controller_id).unwrap().clone());
    spawn_adapter(spec, ctx.clone()).await.expect("registers")
}

fn kinds(events: &[twinloop_core::events::RunEvent]) -> Vec<RunEventKind> {
    events.iter().map(|e| e.kind).collect()
}

async fn drain(mut ticket: twinloop_runtime::adapter::CommandTicket) -> Vec<twinloop_core::events::RunEvent> {
    let mut out = Vec::new();
    while let Some(e) = ticket.next().await {
        let done = e.kind.is_terminal();
        out.push(e);
        if done {
            break;
        }
    }
    out
}

#[tokio::test]
async fn demo_plant_exposes_one_endpoint_per_controller() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::stepped()))
        .await
        .unwrap();
    let kinds: Vec<_> = plant
        .endpoints()
        .iter()
        .map(|e| (e.controller_id.as_str(), e.kind))
        .collect();
    assert_eq!(
        kinds,
        [
            ("plc1", ControllerKind::ModbusPlc),
            ("ros_ras_pi", ControllerKind::RobotGateway)
        ]
    );
    assert!(plant.endpoints().iter().all(|e| e.endpoint.port != 0));

    let empty = start_virtual_plant(&PlantConfig::default(), &opts(ClockOptions::stepped()))
        .await
        .unwrap();
    assert!(empty.endpoints().is_empty());
}

#[tokio::test]
async fn pinned_port_conflict_names_the_controller() {
    let config = demo_config();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut o = opts(ClockOptions::stepped());
    o.port_overrides = BTreeMap::from([("plc1".to_string(), port), ("ros_ras_pi".to_string(), port)]);
    match start_virtual_plant(&config, &o).await {
        Err(PlantError::Bind { controller_id, .. }) => assert_eq!(controller_id, "ros_ras_pi"),
        other => panic!("expected bind error, got {other:?}"),
    }
}

async fn exchange(s: &mut TcpStream, req: Vec<u8>) -> Vec<u8> {
    s.write_all(&req).await.unwrap();
    let mut head = [0u8; 7];
    s.read_exact(&mut head).await.unwrap();
    let mut rest = vec![0u8; u16::from_be_bytes([head[4], head[5]]) as usize - 1];
    s.read_exact(&mut rest).await.unwrap();
    rest
}

#[tokio::test]
async fn modbus_listener_round_trips_frames() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::stepped()))
        .await
        .unwrap();
    let ep = plant.endpoint("plc1").unwrap();
    let mut s = TcpStream::connect((ep.host.as_str(), ep.port)).await.unwrap();
    // Write Single Coil 0x0013 ON, then read it back.
    assert_eq!(
        exchange(&mut s, vec![0, 1, 0, 0, 0, 6, 1, 0x05, 0x00, 0x13, 0xFF, 0x00]).await,
        [0x05, 0x00, 0x13, 0xFF, 0x00]
    );
    assert_eq!(
        exchange(&mut s, vec![0, 2, 0, 0, 0, 6, 1, 0x01, 0x00, 0x13, 0x00, 0x01]).await,
        [0x01, 0x01, 0x01]
    );
    // Quantity 0 is an illegal data value.
    assert_eq!(
        exchange(&mut s, vec![0, 3, 0, 0, 0, 6, 1, 0x01, 0x00, 0x13, 0x00, 0x00]).await,
        [0x81, 0x03]
    );
    // A garbled header closes the connection without hurting the server.
    s.write_all(&[0, 4, 0, 0, 0, 0, 1]).await.unwrap();
    let mut buf = [0u8; 1];
    assert_eq!(s.read(&mut buf).await.unwrap(), 0);
    let mut again = TcpStream::connect((ep.host.as_str(), ep.port)).await.unwrap();
    again
        .write_all(&[0, 5, 0, 0, 0, 6, 1, 0x01, 0x00, 0x13, 0x00, 0x01])
        .await
        .unwrap();
    let mut reply = [0u8; 10];
    again.read_exact(&mut reply).await.unwrap();
    assert_eq!(&reply[7..], [0x01, 0x01, 0x01]);
}

#[tokio::test]
async fn adapter_registers_within_two_seconds() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::realtime(1.0)))
        .await
        .unwrap();
    let (ctx, mut events, _) = context(&config, plant.clock());
    let t0 = Instant::now();
    for c in ["plc1", "ros_ras_pi"] {
        let a = adapter_for(&plant, &config, c, &ctx).await;
        assert!(a.status().registered);
    }
    assert!(t0.elapsed() < Duration::from_secs(2), "took {:?}", t0.elapsed());
    for c in ["plc1", "ros_ras_pi"] {
        let ev = events.recv().await.unwrap();
        assert_eq!(
            (ev.controller_id.as_str(), ev.event.kind),
            (c, RunEventKind::AdapterRegistered)
        );
        assert!(ev.event.command_id.is_none());
    }
}

#[tokio::test]
async fn dead_endpoint_fails_registration() {
    let config = demo_config();
    let clock = SimClock::new(ClockOptions::stepped());
    let (ctx, mut events, _) = context(&config, &clock);
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut spec = AdapterSpec::new(
        config.controller("plc1").unwrap(),
        Mode::Physical,
        twinloop_core::plant::Endpoint {
            host: "127.0.0.1".into(),
            port,
        },
    );
    spec.retry = RetryPolicy {
        attempts: 0,
        backoff_ms: 0,
    };
    let err = spawn_adapter(spec, ctx).await.unwrap_err();
    assert!(err.to_string().contains("1 attempt"), "{err}");
    let ev = events.recv().await.unwrap();
    assert_eq!(ev.event.kind, RunEventKind::Failed);
    assert!(
        ev.event.detail.starts_with("registration failed"),
        "{}",
        ev.event.detail
    );
}

#[tokio::test]
async fn stamp_runs_accepted_started_completed() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::fast_forward(0.05, 1)))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let plc = adapter_for(&plant, &config, "plc1", &ctx).await;
    let t0 = plant.clock().now_s();
    let Ack::Accepted(ticket) = plc.submit(cmd("c1", "punching_machine.stamp", &[], 11.0)).await else {
        panic!("rejected")
    };
    let evs = drain(ticket).await;
    assert_eq!(
        kinds(&evs),
        [RunEventKind::Accepted, RunEventKind::Started, RunEventKind::Completed]
    );
    let elapsed = plant.clock().now_s() - t0;
    // Nominal 3 s; completion is seen within one handshake poll of it.
    assert!((3.0..3.0 + 0.2).contains(&elapsed), "{elapsed}");
    // Trigger cleared, machine back to idle.
    support::settle().await;
    assert!(!plant.plc_state("plc1").unwrap().coils[16]);
}

#[tokio::test]
async fn commands_for_other_controllers_are_rejected() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::stepped()))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let plc = adapter_for(&plant, &config, "plc1", &ctx).await;
    let to = [("to", Value::Text("punch".into()))];
    match plc.submit(cmd("c1", "robot_arm.robot_command", &to, 5.0)).await {
        Ack::Rejected { reason, .. } => assert_eq!(reason, "wrong_adapter"),
        Ack::Accepted(_) => panic!("accepted a robot command"),
    }
    match plc
        .submit(cmd(
            "c2",
            "high_bay_warehouse.load_from_warehouse",
            &[("slot", Value::Int(12))],
            5.0,
        ))
        .await
    {
        Ack::Rejected { reason, .. } => assert_eq!(reason, "invalid_params"),
        Ack::Accepted(_) => panic!("accepted slot 12"),
    }
}

#[tokio::test]
async fn short_timeout_times_out_and_clears_trigger() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::fast_forward(0.05, 1)))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let plc = adapter_for(&plant, &config, "plc1", &ctx).await;
    let Ack::Accepted(ticket) = plc.submit(cmd("c1", "punching_machine.stamp", &[], 0.1)).await else {
        panic!("rejected")
    };
    let evs = drain(ticket).await;
    assert_eq!(evs.last().unwrap().kind, RunEventKind::Timeout);
    assert!(!plant.plc_state("plc1").unwrap().coils[16]);
}

#[tokio::test]
async fn second_command_on_a_busy_machine_is_rejected() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::fast_forward(0.05, 1)))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let plc = adapter_for(&plant, &config, "plc1", &ctx).await;
    let Ack::Accepted(first) = plc.submit(cmd("c1", "punching_machine.stamp", &[], 11.0)).await else {
        panic!("rejected")
    };
    match plc.submit(cmd("c2", "punching_machine.stamp", &[], 11.0)).await {
        Ack::Rejected { reason, .. } => assert_eq!(reason, "busy"),
        Ack::Accepted(_) => panic!("two commands on one machine"),
    }
    // Another machine on the same controller is free.
    let Ack::Accepted(other) = plc.submit(cmd("c3", "indexed_line.mill_and_drill", &[], 26.0)).await else {
        panic!("rejected")
    };
    assert!(plc.wait_idle("punching_machine", 30.0).await);
    assert_eq!(first.terminal().await.unwrap().kind, RunEventKind::Completed);
    assert_eq!(other.terminal().await.unwrap().kind, RunEventKind::Completed);
}

#[tokio::test]
async fn robot_move_completes_at_target() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::fast_forward(0.05, 1)))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let robot = adapter_for(&plant, &config, "ros_ras_pi", &ctx).await;
    let to = [("to", Value::Text("punch".into()))];
    let Ack::Accepted(ticket) = robot.submit(cmd("c1", "robot_arm.robot_command", &to, 14.0)).await else {
        panic!("rejected")
    };
    match robot.submit(cmd("c2", "robot_arm.robot_command", &to, 14.0)).await {
        Ack::Rejected { reason, .. } => assert_eq!(reason, "busy"),
        Ack::Accepted(_) => panic!("robot accepted two commands"),
    }
    let evs = drain(ticket).await;
    assert_eq!(
        kinds(&evs),
        [RunEventKind::Accepted, RunEventKind::Started, RunEventKind::Completed]
    );
    assert_eq!(evs[2].detail, "at punch");
    assert_eq!(plant.gateway_state("ros_ras_pi").unwrap().position, "punch");
}

struct Collect(std::sync::Mutex<Vec<TelemetrySample>>);

impl TelemetrySink for Collect {
    fn accept(&self, s: &TelemetrySample) {
        self.0.lock().unwrap().push(s.clone());
    }
}

#[tokio::test]
async fn polling_publishes_changes_and_counts_cycles() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::stepped()))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let seen = std::sync::Arc::new(Collect(Default::default()));
    ctx.bus.add_sink(seen.clone());
    let mut spec = AdapterSpec::new(
        config.controller("plc1").unwrap(),
        Mode::Virtual,
        plant.endpoint("plc1").unwrap().clone(),
    );
    spec.poll_interval_ms = 100;
    spec.snapshot_every = 1000;
    let plc = spawn_adapter(spec, ctx.clone()).await.unwrap();
    settle().await;
    let mut per_poll = Vec::new();
    for _ in 0..10 {
        plant.step(0.1);
        settle().await;
        per_poll.push(std::mem::take(&mut *seen.0.lock().unwrap()));
    }
    assert_eq!(plc.polls(), 10);
    assert!(!per_poll[0].is_empty(), "first poll is a snapshot");
    assert!(
        per_poll[1].is_empty(),
        "idle plant publishes nothing new: {:?}",
        per_poll[1]
    );
    let filter = TopicFilter::parse("plant/+/+/+").unwrap();
    assert!(per_poll[0].iter().all(|s| filter.matches(&s.topic)));
}

#[tokio::test]
async fn stamp_busy_signal_rises_and_falls() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::fast_forward(0.05, 1)))
        .await
        .unwrap();
    let (ctx, _, _) = context(&config, plant.clock());
    let store = std::sync::Arc::new(TelemetryStore::in_memory(1000));
    ctx.bus.add_sink(store.clone());
    let mut spec = AdapterSpec::new(
        config.controller("plc1").unwrap(),
        Mode::Virtual,
        plant.endpoint("plc1").unwrap().clone(),
    );
    spec.poll_interval_ms = 100;
    let plc = spawn_adapter(spec, ctx.clone()).await.unwrap();
    plant.clock().sleep(0.5).await;
    let Ack::Accepted(t) = plc.submit(cmd("c1", "punching_machine.stamp", &[], 11.0)).await else {
        panic!("rejected")
    };
    t.terminal().await.unwrap();
    plant.clock().sleep(0.5).await;
    let busy: Vec<bool> = store
        .query("plant/*/punch*/busy", None, None)
        .unwrap()
        .iter()
        .map(|s| s.value == Value::Bool(true))
        .collect();
    let mut transitions = busy.clone();
    transitions.dedup();
    assert_eq!(transitions, [false, true, false], "{busy:?}");
}

#[tokio::test]
async fn event_order_holds_under_random_interleavings() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::fast_forward(0.25, 1)))
        .await
        .unwrap();
    let (ctx, mut events, _) = context(&config, plant.clock());
    let plc = adapter_for(&plant, &config, "plc1", &ctx).await;
    let robot = adapter_for(&plant, &config, "ros_ras_pi", &ctx).await;
    let caps = [
        ("high_bay_warehouse.load_from_warehouse", vec![("slot", Value::Int(0))]),
        ("punching_machine.stamp", vec![]),
        ("indexed_line.mill_and_drill", vec![]),
        ("robot_arm.robot_command", vec![("to", Value::Text("index".into()))]),
    ];
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
    let mut tickets = Vec::new();
    let mut accepted = 0;
    for i in 0..40 {
        let (cap, params) = &caps[rng.random_range(0..caps.len())];
        let a = if cap.starts_with("robot") { &robot } else { &plc };
        let timeout = if rng.random_bool(0.2) { 1.0 } else { 40.0 };
        if let Ack::Accepted(t) = a.submit(cmd(&format!("r.{i}"), cap, params, timeout)).await {
            accepted += 1;
            tickets.push(tokio::spawn(t.terminal()));
        }
        plant.clock().sleep(rng.random_range(0.0..3.0)).await;
    }
    let mut terminals = 0;
    for t in tickets {
        assert!(t.await.unwrap().unwrap().kind.is_terminal());
        terminals += 1;
    }
    assert_eq!(terminals, accepted);
    let mut order = EventOrder::default();
    let mut per_command: BTreeMap<String, usize> = BTreeMap::new();
    while let Ok(ev) = events.try_recv() {
        order.observe(&ev.event).unwrap();
        if ev.event.kind.is_terminal() {
            if let Some(id) = &ev.event.command_id {
                *per_command.entry(id.clone()).or_default() += 1;
            }
        }
    }
    assert!(order.open_commands().is_empty());
    assert_eq!(per_command.len(), accepted);
    assert!(per_command.values().all(|&n| n == 1));
    assert!(accepted >= 10, "only {accepted} accepted");
}

#[tokio::test]
async fn gateway_keeps_one_active_command_under_concurrent_clients() {
    let config = demo_config();
    let plant = start_virtual_plant(&config, &opts(ClockOptions::stepped()))
        .await
        .unwrap();
    let ep = plant.endpoint("ros_ras_pi").unwrap().clone();
    let mut joins = Vec::new();
    for i in 0..16 {
        let ep = ep.clone();
        joins.push(tokio::spawn(async move {
            let s = TcpStream::connect((ep.host.as_str(), ep.port)).await.unwrap();
            let (r, mut w) = s.into_split();
            let msg = RobotMessage::Cmd {
                request_id: Some(format!("q{i}")),
                command: "move".into(),
                params: BTreeMap::from([("to".to_string(), Value::Text("index".into()))]),
            };
            w.write_all(msg.to_line().as_bytes()).await.unwrap();
            let line = BufReader::new(r).lines().next_line().await.unwrap().unwrap();
            RobotMessage::from_line(&line).unwrap()
        }));
    }
    let mut accepted = 0;
    for j in joins {
        match j.await.unwrap() {
            RobotMessage::Accepted { .. } => accepted += 1,
            RobotMessage::Rejected { reason, .. } => {
                assert_eq!(reason, twinloop_core::emulator::robot::RejectReason::Busy)
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(accepted, 1);
}

#[test]
fn normalization_drops_endpoints_request_ids_and_poll_repeats() {
    use serde_json::json;
    use twinloop_core::emulator::modbus::Request;
    use twinloop_runtime::wire::{normalized_command_ops, Channel, WireKind, WireOp};

    let op = |seq, endpoint: &str, channel, op| WireOp {
        seq,
        controller_id: if matches!(op, WireKind::Modbus { .. }) {
            "plc1"
        } else {
            "ros_ras_pi"
        }
        .into(),
        endpoint: endpoint.into(),
        channel,
        op,
    };
    let poll = || WireKind::Modbus {
        request: Request::ReadDiscreteInputs {
            address: 0,
            quantity: 8,
        },
        response: "020100".into(),
    };
    let cmd = |rid: &str| WireKind::Gateway {
        sent: json!({"type": "cmd", "command": "move", "params": {"to": "punch"}, "request_id": rid}),
        reply: Some(json!({"type": "accepted", "command_id": "cmd-1", "request_id": rid})),
    };
    let a = vec![
        op(1, "127.0.0.1:1502", Channel::Command, poll()),
        op(2, "127.0.0.1:1502", Channel::Command, poll()),
        op(3, "127.0.0.1:1502", Channel::Telemetry, poll()),
        op(4, "127.0.0.1:1600", Channel::Command, cmd("c9")),
    ];
    let b = vec![
        op(1, "10.0.0.5:502", Channel::Command, poll()),
        op(2, "10.0.0.6:1600", Channel::Command, cmd("c2")),
    ];
    let na = normalized_command_ops(&a);
    assert_eq!(na, normalized_command_ops(&b));
    assert_eq!(na.len(), 2);
    let WireKind::Gateway { sent, .. } = &na[1].1 else {
        panic!()
    };
    assert_eq!(sent["params"]["to"], "punch");
    assert!(sent.get("request_id").is_none());
}
