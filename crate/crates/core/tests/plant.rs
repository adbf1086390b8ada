use proptest::prelude::*;
use twinloop_core::aml::{parse_caex, validate_structure, CaexDocument, InternalElement};
use twinloop_core::plant::*;

const DEMO: &str = include_str!("../fixtures/demo_plant.aml");

fn extract(xml: &str) -> Result<Extraction, ExtractErrors> {
    let doc = parse_caex(xml).expect("parses");
    extract_plant_config(&doc, &RoleMapping::default())
}

fn demo() -> PlantConfig {
    extract(DEMO).expect("demo extracts").config
}

#[test]
fn demo_inventory() {
    let x = extract(DEMO).unwrap();
    let c = &x.config;
    let kinds: Vec<_> = c.machines.iter().map(|m| (m.name.as_str(), m.kind)).collect();
    assert_eq!(
        kinds,
        [
            ("HighBayWarehouse", MachineKind::Warehouse),
            ("PunchingMachine", MachineKind::ProcessingStation),
            ("IndexedLine", MachineKind::ProcessingStation),
            ("RobotArm", MachineKind::Robot),
        ]
    );
    let ctrl: Vec<_> = c.controllers.iter().map(|c| c.kind).collect();
    assert_eq!(ctrl, [ControllerKind::ModbusPlc, ControllerKind::RobotGateway]);
    let caps: Vec<_> = c.capabilities.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(
        caps,
        [
            "LoadFromWarehouse",
            "StoreToWarehouse",
            "Stamp",
            "MillAndDrill",
            "RobotCommand"
        ]
    );
    assert!(check_integrity(c).is_empty());
    assert!(x.warnings.is_empty(), "{:?}", x.warnings);
}

#[test]
fn demo_bindings_match_hand_traced_links() {
    // (function, machine) as read off the five InternalLinks of the fixture.
    let expected = [
        ("LoadFromWarehouse", "HighBayWarehouse"),
        ("StoreToWarehouse", "HighBayWarehouse"),
        ("Stamp", "PunchingMachine"),
        ("MillAndDrill", "IndexedLine"),
        ("RobotCommand", "RobotArm"),
    ];
    let c = demo();
    for (f, m) in expected {
        let cap = c.capabilities_named(f).next().unwrap();
        assert_eq!(c.machine(&cap.machine_id).unwrap().name, m, "{f}");
    }
}

#[test]
fn demo_register_map_follows_block_convention() {
    let c = demo();
    // machine index within PLC1: warehouse 0, punching 1, indexed line 2 -> base 0, 16, 32
    let expect = [
        ("LoadFromWarehouse", 0u16, 0u16, vec![1u16]),
        ("StoreToWarehouse", 1, 0, vec![1]),
        ("Stamp", 16, 16, vec![]),
        ("MillAndDrill", 32, 32, vec![]),
    ];
    for (name, coil, busy, params) in expect {
        let cap = c.capabilities_named(name).next().unwrap();
        let InvocationSpec::Modbus {
            trigger,
            param_registers,
            busy: b,
            done,
            error,
        } = &cap.invocation
        else {
            panic!("{name} is not modbus")
        };
        assert_eq!(*trigger, ProtocolAddress::coil(coil), "{name}");
        assert_eq!(*b, ProtocolAddress::discrete(busy));
        assert_eq!(*done, ProtocolAddress::discrete(busy + 1));
        assert_eq!(*error, Some(ProtocolAddress::discrete(busy + 2)));
        let regs: Vec<u16> = param_registers.iter().map(|r| r.address).collect();
        assert_eq!(regs, params);
    }
    let punch = c.machine("punching_machine").unwrap();
    let item = punch.signals.iter().find(|s| s.name == "item_present").unwrap();
    assert_eq!(item.binding, SignalBinding::Modbus(ProtocolAddress::discrete(19)));
    let line = c.machine("indexed_line").unwrap();
    let pos = line.signals.iter().find(|s| s.name == "station_position").unwrap();
    assert_eq!(pos.binding, SignalBinding::Modbus(ProtocolAddress::input(32)));
}

#[test]
fn demo_ids_durations_and_params() {
    let c = demo();
    let ids: Vec<_> = c.capabilities.iter().map(|c| c.capability_id.as_str()).collect();
    assert_eq!(
        ids,
        [
            "high_bay_warehouse.load_from_warehouse",
            "high_bay_warehouse.store_to_warehouse",
            "punching_machine.stamp",
            "indexed_line.mill_and_drill",
            "robot_arm.robot_command",
        ]
    );
    let durations: Vec<f64> = c.capabilities.iter().map(|c| c.nominal_duration_s).collect();
    assert_eq!(durations, [5.0, 5.0, 3.0, 8.0, 4.0]);
    let robot = c.capability("robot_arm.robot_command").unwrap();
    assert_eq!(
        robot.invocation,
        InvocationSpec::Robot {
            command: "move".into(),
            param_names: vec!["to".into()]
        }
    );
    assert_eq!(
        robot.params[0].choices.as_deref(),
        Some(&["warehouse".to_string(), "punch".into(), "index".into()][..])
    );
    let slot = &c.capability("high_bay_warehouse.load_from_warehouse").unwrap().params[0];
    assert_eq!(slot.range, Some(IntRange { min: 0, max: 8 }));
    assert!(slot.check(&9.into()).is_err());
    assert!(slot.check(&3.into()).is_ok());
    let gw = c.controller("ros_ras_pi").unwrap();
    assert_eq!(
        gw.endpoint,
        Endpoint {
            host: "127.0.0.1".into(),
            port: 1600
        }
    );
    assert_eq!(
        c.zones.iter().map(|z| z.zone_id.as_str()).collect::<Vec<_>>(),
        ["factory", "warehouse", "processing_area"]
    );
    assert_eq!(c.zones[2].parent_zone_id.as_deref(), Some("factory"));
    assert_eq!(
        c.zones[2].machine_ids,
        ["punching_machine", "indexed_line", "robot_arm"]
    );
    assert_eq!(
        c.metadata["machine_attributes"]["high_bay_warehouse"]["Asset3D"],
        "prefabs/HighBayWarehouse.fbx"
    );
}

#[test]
fn demo_accounting_balances() {
    let x = extract(DEMO).unwrap();
    let a = x.accounting;
    // 3 zones, 4 machines, 7 components, 2 controllers, 5 functions
    assert_eq!(a.role_bearing, 21);
    assert_eq!(
        (a.zones, a.machines, a.skipped, a.controllers, a.functions),
        (3, 4, 7, 2, 5)
    );
    assert!(a.balanced());
    assert!(x.skipped.iter().all(|s| s.reason == SkipReason::Ignored));
}

#[test]
fn unbound_stamp() {
    let line = DEMO.lines().find(|l| l.contains("Name=\"StampLink\"")).unwrap();
    let err = extract(&DEMO.replace(line, "")).unwrap_err();
    assert_eq!(err.0, [ExtractError::UnboundFunction("Stamp".into())]);
    assert_eq!(err.to_string(), "unbound function: Stamp");
}

#[test]
fn no_role_matches_gives_empty_config_with_warnings() {
    let mapping = RoleMapping::from_json(r#"{"schema":"rolemapping/1","roles":{}}"#).unwrap();
    let doc = parse_caex(DEMO).unwrap();
    let x = extract_plant_config(&doc, &mapping).unwrap();
    assert!(x.config.machines.is_empty() && x.config.controllers.is_empty() && x.config.capabilities.is_empty());
    assert_eq!(x.warnings.len(), x.accounting.role_bearing);
    assert_eq!(x.skipped.len(), 21);
    assert!(x.accounting.balanced());
}

#[test]
fn missing_port_is_error() {
    let doc = DEMO.replacen("<Value>1502</Value>", "<Value></Value>", 1);
    let err = extract(&doc).unwrap_err();
    assert!(err.0.contains(&ExtractError::MissingEndpoint {
        controller: "PLC1".into(),
        attribute: "Port"
    }));
}

#[test]
fn default_duration_when_absent() {
    let block = "<Attribute Name=\"NominalDuration\" AttributeDataType=\"xs:double\" Unit=\"s\">\n          <Value>3</Value>\n        </Attribute>";
    assert!(DEMO.contains(block));
    let c = extract(&DEMO.replace(block, "")).unwrap().config;
    assert_eq!(
        c.capability("punching_machine.stamp").unwrap().nominal_duration_s,
        DEFAULT_NOMINAL_DURATION_S
    );
}

#[test]
fn serialization_is_deterministic_and_round_trips() {
    let a = serialize_config(&demo());
    let b = serialize_config(&demo());
    assert_eq!(a, b);
    assert!(a.starts_with("{\n  \"schema\": \"plantconfig/1\""));
    assert!(a.contains("\"name\": \"LoadFromWarehouse\""));
    assert_eq!(deserialize_config(&a).unwrap(), demo());
}

#[test]
fn empty_config_round_trips() {
    let empty = PlantConfig::default();
    let text = serialize_config(&empty);
    assert!(text.contains("\"machines\": []"));
    assert_eq!(deserialize_config(&text).unwrap(), empty);
}

#[test]
fn unknown_controller_reference() {
    let mut v: serde_json::Value = serde_json::from_str(&serialize_config(&demo())).unwrap();
    v["capabilities"][0]["controller_id"] = "nope".into();
    let err = deserialize_config(&v.to_string()).unwrap_err();
    assert_eq!(err.to_string(), "capabilities[0].controller_id: unknown");
}

#[test]
fn schema_and_field_errors() {
    let text = serialize_config(&demo());
    let err = deserialize_config(&text.replace("plantconfig/1", "plantconfig/2")).unwrap_err();
    assert!(matches!(err, ConfigError::Schema(s) if s == "plantconfig/2"));
    let err = deserialize_config(&text.replacen("\"port\": 1502", "\"port\": 70000", 1)).unwrap_err();
    assert!(err.to_string().starts_with("controllers[0].endpoint.port"), "{err}");
    let err = deserialize_config(&text.replacen("\"unit_id\": 1", "\"unit_id\": 1, \"bogus\": 2", 1)).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
    assert!(matches!(deserialize_config("{}"), Err(ConfigError::MissingSchema)));
}

#[test]
fn diff_cases() {
    let c = demo();
    assert!(diff_configs(&c, &c).is_empty());

    let mut renamed = c.clone();
    renamed.capabilities[2].name = "Punch".into();
    let d = diff_configs(&c, &renamed);
    assert_eq!(d.capabilities.modified, ["punching_machine.stamp"]);
    assert!(d.machines.is_empty() && d.controllers.is_empty() && d.zones.is_empty() && d.plant_fields.is_empty());

    let empty = PlantConfig::default();
    let d = diff_configs(&c, &empty);
    assert_eq!(d.machines.removed.len(), 4);
    assert_eq!(d.controllers.removed.len(), 2);
    assert_eq!(d.capabilities.removed.len(), 5);
    assert_eq!(d.zones.removed.len(), 3);
    let back = diff_configs(&empty, &c);
    assert_eq!(back.machines.added, d.machines.removed);
    assert_eq!(back.capabilities.added, d.capabilities.removed);

    let mut reordered = c.clone();
    reordered.machines.reverse();
    assert_eq!(diff_configs(&c, &reordered).plant_fields, ["machines order"]);
}

fn element_paths(doc: &CaexDocument) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, elems: &[InternalElement], out: &mut Vec<Vec<usize>>) {
        for (i, e) in elems.iter().enumerate() {
            prefix.push(i);
            out.push(prefix.clone());
            go(prefix, &e.children, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for (h, ih) in doc.instance_hierarchies.iter().enumerate() {
        go(&mut vec![h], &ih.internal_elements, &mut out);
    }
    out
}

fn remove_at(doc: &mut CaexDocument, path: &[usize]) {
    let ih = &mut doc.instance_hierarchies[path[0]];
    let mut level = &mut ih.internal_elements;
    for &i in &path[1..path.len() - 1] {
        level = &mut level[i].children;
    }
    level.remove(*path.last().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Random subtree deletions either keep referential integrity or fail extraction.
    #[test]
    fn subtree_deletion_keeps_integrity(picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..4)) {
        let mut doc = parse_caex(DEMO).unwrap();
        for p in &picks {
            let paths = element_paths(&doc);
            if paths.is_empty() { break; }
            let victim = p.get(&paths).clone();
            remove_at(&mut doc, &victim);
        }
        if validate_structure(&doc).has_errors() {
            return Ok(());
        }
        if let Ok(x) = extract_plant_config(&doc, &RoleMapping::default()) {
            prop_assert!(check_integrity(&x.config).is_empty(), "{:?}", check_integrity(&x.config));
            prop_assert!(x.accounting.balanced());
            let text = serialize_config(&x.config);
            prop_assert_eq!(deserialize_config(&text).unwrap(), x.config);
        }
    }
}
