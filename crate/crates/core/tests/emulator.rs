use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rmodbus::client::ModbusRequest;
use rmodbus::server::storage::ModbusStorageFull;
use rmodbus::server::ModbusFrame;
use rmodbus::ModbusProto;

use twinloop_core::aml::parse_caex;
use twinloop_core::emulator::modbus::{handle_adu, handle_pdu, Request, Response, ResponseError};
use twinloop_core::emulator::robot::{GatewayPhase, RejectReason, RobotEvent};
use twinloop_core::emulator::{MachineBehavior, Phase, PlcEmulator, PlcState, RobotGatewayState, RobotMessage};
use twinloop_core::plant::{extract_plant_config, PlantConfig, ProtocolAddress, RoleMapping};
use twinloop_core::value::Value;

const DEMO: &str = include_str!("../fixtures/demo_plant.aml");
/// rmodbus' full storage holds 10000 entries per table.
const REF_LIMIT: u16 = 10_000;

fn demo() -> PlantConfig {
    let doc = parse_caex(DEMO).unwrap();
    extract_plant_config(&doc, &RoleMapping::default()).unwrap().config
}

fn reference_server_reply(storage: &mut ModbusStorageFull, unit: u8, adu: &[u8]) -> Vec<u8> {
    let mut buf = [0u8; 256];
    buf[..adu.len()].copy_from_slice(adu);
    let mut response = Vec::new();
    let mut frame = ModbusFrame::new(unit, &buf, ModbusProto::TcpUdp, &mut response);
    frame.parse().unwrap();
    if frame.processing_required {
        if frame.readonly {
            frame.process_read(storage).unwrap();
        } else {
            frame.process_write(storage).unwrap();
        }
    }
    assert!(frame.response_required);
    frame.finalize_response().unwrap();
    response
}

fn random_request(rng: &mut StdRng) -> Request {
    let span = |rng: &mut StdRng, max: u16| {
        let q = rng.random_range(1..=max);
        (rng.random_range(0..=REF_LIMIT - q), q)
    };
    match rng.random_range(0..8) {
        0 => {
            let (address, quantity) = span(rng, 2000);
            Request::ReadCoils { address, quantity }
        }
        1 => {
            let (address, quantity) = span(rng, 2000);
            Request::ReadDiscreteInputs { address, quantity }
        }
        2 => {
            let (address, quantity) = span(rng, 125);
            Request::ReadHoldingRegisters { address, quantity }
        }
        3 => {
            let (address, quantity) = span(rng, 125);
            Request::ReadInputRegisters { address, quantity }
        }
        4 => Request::WriteSingleCoil {
            address: rng.random_range(0..REF_LIMIT),
            value: rng.random(),
        },
        5 => Request::WriteSingleRegister {
            address: rng.random_range(0..REF_LIMIT),
            value: rng.random(),
        },
        6 => {
            let (address, n) = span(rng, 64);
            Request::WriteMultipleCoils {
                address,
                values: (0..n).map(|_| rng.random()).collect(),
            }
        }
        _ => {
            let (address, n) = span(rng, 64);
            Request::WriteMultipleRegisters {
                address,
                values: (0..n).map(|_| rng.random()).collect(),
            }
        }
    }
}

fn reference_encode(req: &Request, tid: u16, unit: u8) -> Vec<u8> {
    let mut r = ModbusRequest::new_tcp_udp(unit, tid);
    let mut out = Vec::new();
    match req {
        Request::ReadCoils { address, quantity } => r.generate_get_coils(*address, *quantity, &mut out),
        Request::ReadDiscreteInputs { address, quantity } => r.generate_get_discretes(*address, *quantity, &mut out),
        Request::ReadHoldingRegisters { address, quantity } => r.generate_get_holdings(*address, *quantity, &mut out),
        Request::ReadInputRegisters { address, quantity } => r.generate_get_inputs(*address, *quantity, &mut out),
        Request::WriteSingleCoil { address, value } => r.generate_set_coil(*address, *value, &mut out),
        Request::WriteSingleRegister { address, value } => r.generate_set_holding(*address, *value, &mut out),
        Request::WriteMultipleCoils { address, values } => r.generate_set_coils_bulk(*address, values, &mut out),
        Request::WriteMultipleRegisters { address, values } => r.generate_set_holdings_bulk(*address, values, &mut out),
    }
    .unwrap();
    out
}

#[test]
fn randomized_ops_match_reference_server_and_client() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let unit = 1;
    let mut ours = PlcState::new(unit);
    let mut reference = Box::<ModbusStorageFull>::default();
    for a in 0..REF_LIMIT as usize {
        let di: bool = rng.random();
        let ir: u16 = rng.random();
        ours.discrete_inputs[a] = di;
        ours.input_registers[a] = ir;
        reference.discretes[a] = di;
        reference.inputs[a] = ir;
    }
    for i in 0..1000u16 {
        let req = random_request(&mut rng);
        let adu = req.encode(i, unit);
        assert_eq!(adu, reference_encode(&req, i, unit), "request encoding of {req:?}");
        let got = handle_adu(&adu, &mut ours).unwrap();
        let want = reference_server_reply(&mut reference, unit, &adu);
        assert_eq!(got, want, "response to {req:?}");
        req.decode(i, &got).unwrap();
    }
    assert_eq!(&ours.coils[..REF_LIMIT as usize], &reference.coils[..]);
    assert_eq!(&ours.holding_registers[..REF_LIMIT as usize], &reference.holdings[..]);
}

#[test]
fn read_your_writes() {
    let mut rng = StdRng::seed_from_u64(7);
    let mut plc = PlcState::new(1);
    let mut coils = BTreeMap::new();
    let mut regs = BTreeMap::new();
    for i in 0..500u16 {
        let address = rng.random_range(0..u16::MAX - 8);
        let req = if rng.random() {
            let values: Vec<bool> = (0..rng.random_range(1..=8)).map(|_| rng.random()).collect();
            for (k, v) in values.iter().enumerate() {
                coils.insert(address + k as u16, *v);
            }
            Request::WriteMultipleCoils { address, values }
        } else {
            let value = rng.random();
            regs.insert(address, value);
            Request::WriteSingleRegister { address, value }
        };
        assert_eq!(
            req.decode(i, &handle_adu(&req.encode(i, 1), &mut plc).unwrap()),
            Ok(Response::Written)
        );
    }
    for (&address, &v) in &coils {
        let req = Request::ReadCoils { address, quantity: 1 };
        let resp = req
            .decode(0, &handle_adu(&req.encode(0, 1), &mut plc).unwrap())
            .unwrap();
        assert_eq!(resp, Response::Bits(vec![v]), "coil {address}");
    }
    for (&address, &v) in &regs {
        let req = Request::ReadHoldingRegisters { address, quantity: 1 };
        let resp = req
            .decode(0, &handle_adu(&req.encode(0, 1), &mut plc).unwrap())
            .unwrap();
        assert_eq!(resp, Response::Registers(vec![v]), "register {address}");
    }
}

#[test]
fn exception_codes() {
    let mut plc = PlcState::new(1);
    // Each case: request PDU, expected exception response PDU.
    let cases: &[(&[u8], &[u8])] = &[
        (&[0x01, 0x00, 0x00, 0x00, 0x00], &[0x81, 0x03]),
        (&[0x01, 0x00, 0x00, 0x07, 0xD1], &[0x81, 0x03]),
        (&[0x01, 0xFF, 0xFF, 0x00, 0x02], &[0x81, 0x02]),
        (&[0x03, 0x00, 0x00, 0x00, 0x7E], &[0x83, 0x03]),
        (&[0x03, 0xFF, 0xF0, 0x00, 0x11], &[0x83, 0x02]),
        (&[0x04, 0xFF, 0xFF, 0x00, 0x01], &[0x04, 0x02, 0x00, 0x00]),
        (&[0x05, 0x00, 0x01, 0x12, 0x34], &[0x85, 0x03]),
        (&[0x0F, 0xFF, 0xFF, 0x00, 0x02, 0x01, 0x03], &[0x8F, 0x02]),
        (&[0x0F, 0x00, 0x00, 0x00, 0x09, 0x01, 0x03], &[0x8F, 0x03]),
        (&[0x10, 0x00, 0x00, 0x00, 0x01, 0x03, 0, 0, 0], &[0x90, 0x03]),
        (&[0x10, 0xFF, 0xFF, 0x00, 0x02, 0x04, 0, 1, 0, 2], &[0x90, 0x02]),
        (&[0x2B, 0x0E, 0x01, 0x00], &[0xAB, 0x01]),
    ];
    for (req, want) in cases {
        assert_eq!(handle_pdu(req, &mut plc), want.to_vec(), "request {req:02x?}");
    }
    let req = Request::ReadHoldingRegisters {
        address: 0xFFFF,
        quantity: 2,
    };
    let err = req
        .decode(9, &handle_adu(&req.encode(9, 1), &mut plc).unwrap())
        .unwrap_err();
    assert_eq!(
        err,
        ResponseError::Exception {
            function: 0x03,
            code: 0x02
        }
    );
}

#[test]
fn framing_errors_are_reported() {
    let mut plc = PlcState::new(1);
    assert!(handle_adu(&[0, 1, 0, 0], &mut plc).is_err());
    assert!(handle_adu(&[0, 1, 0, 7, 0, 6, 1, 3, 0, 0, 0, 1], &mut plc).is_err());
    assert!(handle_adu(&[0, 1, 0, 0, 0, 9, 1, 3, 0, 0, 0, 1], &mut plc).is_err());
}

#[test]
fn read_transaction_mismatch_is_detected() {
    let mut plc = PlcState::new(1);
    let req = Request::ReadCoils {
        address: 0,
        quantity: 1,
    };
    let resp = handle_adu(&req.encode(3, 1), &mut plc).unwrap();
    assert_eq!(
        req.decode(4, &resp),
        Err(ResponseError::Transaction { expected: 4, got: 3 })
    );
}

fn emulator(config: &PlantConfig) -> PlcEmulator {
    PlcEmulator::from_config(config, "plc1").unwrap()
}

#[test]
fn stamp_reaches_done_in_ceil_duration_over_dt_steps() {
    let config = demo();
    let mut emu = emulator(&config);
    // Stamp: 3 s nominal, trigger coil 16, busy DI 16, done DI 17.
    for (dt, expected) in [(0.1, 30), (0.25, 12), (0.4, 8), (0.7, 5), (3.0, 1), (5.0, 1)] {
        let mut e = emu.clone();
        e.plc.coils[16] = true;
        let mut steps = 0;
        while !e.plc.discrete_inputs[17] {
            e.step(dt);
            steps += 1;
            if steps < expected {
                assert!(e.plc.discrete_inputs[16], "busy at step {steps} dt {dt}");
            }
            assert!(steps <= expected, "dt {dt}: still not done after {expected} steps");
        }
        assert_eq!(steps, expected, "dt {dt}");
        assert!(!e.plc.discrete_inputs[16]);
    }

    emu.plc.coils[16] = true;
    emu.step(0.5);
    assert!(emu.plc.discrete_inputs[19], "item present while stamping");
    for _ in 0..6 {
        emu.step(0.5);
    }
    assert!(emu.plc.discrete_inputs[17]);
    emu.step(0.5);
    assert!(emu.plc.discrete_inputs[17], "done stays latched while trigger is held");
    emu.plc.coils[16] = false;
    emu.step(0.5);
    assert!(!emu.plc.discrete_inputs[17] && !emu.plc.discrete_inputs[16] && !emu.plc.discrete_inputs[19]);
}

#[test]
fn trigger_while_busy_pulses_error_and_is_ignored() {
    let config = demo();
    let mut emu = emulator(&config);
    // Warehouse: load coil 0, store coil 1, error DI 2, slot register HR 1.
    emu.plc.holding_registers[1] = 0;
    emu.plc.coils[0] = true;
    emu.step(1.0);
    let wh = &emu.behaviors[0];
    assert_eq!(wh.phase, Phase::Busy);
    emu.plc.coils[1] = true;
    emu.step(1.0);
    assert!(emu.plc.discrete_inputs[2], "error pulse");
    assert_eq!(emu.behaviors[0].active, Some(0));
    emu.step(1.0);
    assert!(!emu.plc.discrete_inputs[2], "pulse lasts one step");
}

#[test]
fn warehouse_store_sets_slot_bit() {
    let config = demo();
    let mut emu = emulator(&config);
    let occ = ProtocolAddress::input(0);
    assert_eq!(emu.plc.read(occ), 0b1);
    // Load slot 0 (5 s), then store into slot 3 (5 s).
    emu.plc.holding_registers[1] = 0;
    emu.plc.coils[0] = true;
    for _ in 0..5 {
        emu.step(1.0);
    }
    assert_eq!(emu.plc.read(occ), 0);
    emu.plc.coils[0] = false;
    emu.step(1.0);
    emu.plc.holding_registers[1] = 3;
    emu.plc.coils[1] = true;
    for _ in 0..5 {
        emu.step(1.0);
    }
    assert!(emu.plc.discrete_inputs[1]);
    assert_eq!(emu.plc.read(occ), 0b1000);
}

#[test]
fn loading_an_empty_slot_faults_until_trigger_clears() {
    let config = demo();
    let mut emu = emulator(&config);
    emu.plc.holding_registers[1] = 4;
    emu.plc.coils[0] = true;
    emu.step(0.5);
    assert_eq!(emu.behaviors[0].phase, Phase::Faulted);
    assert!(emu.plc.discrete_inputs[2]);
    emu.step(0.5);
    assert!(emu.plc.discrete_inputs[2], "fault holds while trigger is set");
    emu.plc.coils[0] = false;
    emu.step(0.5);
    assert_eq!(emu.behaviors[0].phase, Phase::Idle);
    assert!(!emu.plc.discrete_inputs[2]);
}

#[test]
fn indexed_line_reports_station_position() {
    let config = demo();
    let mut emu = emulator(&config);
    // MillAndDrill: 8 s, trigger coil 32, station position IR 32.
    let pos = ProtocolAddress::input(32);
    emu.plc.coils[32] = true;
    let mut seen = Vec::new();
    for _ in 0..8 {
        emu.step(1.0);
        seen.push(emu.plc.read(pos));
    }
    assert_eq!(seen, [1, 1, 1, 2, 2, 2, 2, 0]);
}

#[test]
fn non_modbus_machine_has_no_behavior() {
    let config = demo();
    assert!(MachineBehavior::from_config(&config, "robot_arm").is_none());
    assert!(PlcEmulator::from_config(&config, "ros_ras_pi").is_none());
}

fn gateway() -> RobotGatewayState {
    let config = demo();
    RobotGatewayState::from_config(&config, config.controller("ros_ras_pi").unwrap()).unwrap()
}

fn line(s: &str) -> RobotMessage {
    RobotMessage::from_line(s).unwrap()
}

#[test]
fn robot_single_command_session() {
    let mut gw = gateway();
    let reply = gw.handle(line(r#"{"type":"status"}"#));
    let RobotMessage::StatusReply { phase, position, .. } = &reply else {
        panic!("{reply:?}")
    };
    assert_eq!((*phase, position.as_str()), (GatewayPhase::Idle, "warehouse"));

    let reply = gw.handle(line(r#"{"type":"cmd","command":"move","params":{"to":"punch"}}"#));
    assert_eq!(reply.to_line(), "{\"type\":\"accepted\",\"command_id\":\"cmd-1\"}\n");
    // RobotCommand nominal duration is 4 s.
    assert_eq!(gw.step(1.5), None);
    assert_eq!(gw.step(1.5), None);
    let ev = gw.step(1.0).unwrap();
    assert_eq!(
        ev,
        RobotMessage::Event {
            event: RobotEvent::Completed,
            command_id: "cmd-1".into(),
            position: "punch".into()
        }
    );
    assert_eq!(gw.step(1.0), None);
    let RobotMessage::StatusReply {
        position,
        last_completed_command_id,
        ..
    } = gw.handle(RobotMessage::Status { request_id: None })
    else {
        panic!()
    };
    assert_eq!(position, "punch");
    assert_eq!(last_completed_command_id.as_deref(), Some("cmd-1"));
}

#[test]
fn robot_two_command_session() {
    let mut gw = gateway();
    let first = gw.handle(line(
        r#"{"type":"cmd","request_id":"a","command":"move","params":{"to":"index"}}"#,
    ));
    assert!(matches!(first, RobotMessage::Accepted { ref command_id, .. } if command_id == "cmd-1"));
    let second = gw.handle(line(r#"{"type":"cmd","request_id":"b","command":"home"}"#));
    let RobotMessage::Rejected { request_id, reason, .. } = second else {
        panic!("{second:?}")
    };
    assert_eq!((request_id.as_deref(), reason), (Some("b"), RejectReason::Busy));
    assert!(gw.step(4.0).is_some());
    let third = gw.handle(line(r#"{"type":"cmd","command":"home"}"#));
    assert!(matches!(third, RobotMessage::Accepted { ref command_id, .. } if command_id == "cmd-2"));
}

#[test]
fn robot_rejects_unknown_command_and_position() {
    let mut gw = gateway();
    let r = gw.handle(line(r#"{"type":"cmd","command":"dance"}"#));
    assert!(matches!(
        r,
        RobotMessage::Rejected {
            reason: RejectReason::UnknownCommand,
            ..
        }
    ));
    let r = gw.handle(RobotMessage::Cmd {
        request_id: None,
        command: "move".into(),
        params: BTreeMap::from([("to".to_string(), Value::Text("moon".into()))]),
    });
    assert!(matches!(
        r,
        RobotMessage::Rejected {
            reason: RejectReason::InvalidParams,
            ..
        }
    ));
    assert_eq!(gw.phase(), GatewayPhase::Idle);
}
