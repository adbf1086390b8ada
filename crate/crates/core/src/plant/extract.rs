use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use super::model::*;
use super::roles::{RoleMapping, RoleTarget};
use crate::aml::{find_attribute, resolve_interface_ref, AmlAttribute, CaexDocument, InternalElement};
use crate::ids::{slug, IdAllocator};
use crate::value::{Value, ValueKind};

pub const DEFAULT_NOMINAL_DURATION_S: f64 = 5.0;
/// Addresses reserved per machine in every Modbus table.
pub const REGISTER_BLOCK: u16 = 16;
/// Holding registers available for parameters in one block (offsets 1..=4).
pub const MAX_MODBUS_PARAMS: usize = 4;
pub const DEFAULT_UNIT_ID: u8 = 1;
pub const DEFAULT_COMMAND_SET: &str = "move,home";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Role mapped to `ignore`.
    Ignored,
    /// No role requirement of the element is known to the mapping.
    UnknownRole,
    /// Known role in an unusable position, e.g. a function outside any controller.
    Misplaced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedElement {
    pub element_path: String,
    pub role: String,
    pub reason: SkipReason,
}

/// Every role-bearing element is counted exactly once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Accounting {
    pub role_bearing: usize,
    pub machines: usize,
    pub controllers: usize,
    pub functions: usize,
    pub zones: usize,
    pub skipped: usize,
}

impl Accounting {
    pub fn balanced(&self) -> bool {
        self.machines + self.controllers + self.functions + self.zones + self.skipped == self.role_bearing
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Extraction {
    pub config: PlantConfig,
    pub warnings: Vec<String>,
    pub skipped: Vec<SkippedElement>,
    pub accounting: Accounting,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("unbound function: {0}")]
    UnboundFunction(String),
    #[error("function {function} is linked to several machines: {}", .machines.join(", "))]
    AmbiguousFunction { function: String, machines: Vec<String> },
    #[error("machine {machine} is driven by several controllers: {}", .controllers.join(", "))]
    SharedMachine { machine: String, controllers: Vec<String> },
    #[error("controller {controller} missing endpoint attribute {attribute}")]
    MissingEndpoint {
        controller: String,
        attribute: &'static str,
    },
    #[error("{element}: invalid {attribute} {value:?}: {reason}")]
    InvalidAttribute {
        element: String,
        attribute: String,
        value: String,
        reason: String,
    },
    #[error("function {function}: {message}")]
    Function { function: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ExtractErrors(pub Vec<ExtractError>);

impl fmt::Display for ExtractErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

type Key = *const InternalElement;

struct Node<'a> {
    element: &'a InternalElement,
    target: Option<RoleTarget>,
    /// Nearest classified ancestor of each relevant class.
    zone_ancestor: Option<Key>,
    machine_ancestor: Option<Key>,
    controller_ancestor: Option<Key>,
}

struct Ctx<'a> {
    nodes: Vec<Node<'a>>,
    index: HashMap<Key, usize>,
    errors: Vec<ExtractError>,
}

impl<'a> Ctx<'a> {
    fn node(&self, key: Key) -> &Node<'a> {
        &self.nodes[self.index[&key]]
    }
}

/// Builds a [`PlantConfig`] from a structurally valid document.
///
/// Machines, controllers, functions and zones are identified by role; each
/// function is bound to the machine owning the interface at the other end of
/// one of its InternalLinks. Output order follows document order.
pub fn extract_plant_config(doc: &CaexDocument, mapping: &RoleMapping) -> Result<Extraction, ExtractErrors> {
    let mut ctx = Ctx {
        nodes: Vec::new(),
        index: HashMap::new(),
        errors: Vec::new(),
    };
    let mut warnings = Vec::new();
    let mut skipped = Vec::new();
    let mut accounting = Accounting::default();

    doc.for_each_instance(|path, ie, ancestors| {
        let nearest = |want: fn(&RoleTarget) -> bool, ctx: &Ctx<'_>| {
            ancestors.iter().rev().map(|a| *a as Key).find(|k| {
                ctx.index
                    .get(k)
                    .and_then(|&i| ctx.nodes[i].target.as_ref())
                    .is_some_and(want)
            })
        };
        let zone_ancestor = nearest(|t| matches!(t, RoleTarget::Zone), &ctx);
        let machine_ancestor = nearest(|t| matches!(t, RoleTarget::Machine { .. }), &ctx);
        let controller_ancestor = nearest(|t| matches!(t, RoleTarget::Controller { .. }), &ctx);

        let mut target = None;
        if !ie.role_requirements.is_empty() {
            accounting.role_bearing += 1;
            target = ie.role_requirements.iter().find_map(|r| mapping.lookup(doc, r));
            let role = ie.role_requirements.join(", ");
            match target {
                None => {
                    warnings.push(format!("unknown role {role} on {path}: element skipped"));
                    skipped.push(SkippedElement {
                        element_path: path.to_string(),
                        role,
                        reason: SkipReason::UnknownRole,
                    });
                }
                Some(RoleTarget::Ignore) => skipped.push(SkippedElement {
                    element_path: path.to_string(),
                    role,
                    reason: SkipReason::Ignored,
                }),
                Some(RoleTarget::Function) if controller_ancestor.is_none() => {
                    warnings.push(format!("function {path} has no controller ancestor: element skipped"));
                    skipped.push(SkippedElement {
                        element_path: path.to_string(),
                        role,
                        reason: SkipReason::Misplaced,
                    });
                    target = None;
                }
                Some(_) => {}
            }
        }
        ctx.index.insert(ie as Key, ctx.nodes.len());
        ctx.nodes.push(Node {
            element: ie,
            target,
            zone_ancestor,
            machine_ancestor,
            controller_ancestor,
        });
    });

    let mut ids = IdAllocator::default();
    let mut zone_ids: HashMap<Key, String> = HashMap::new();
    let mut machine_ids: HashMap<Key, String> = HashMap::new();
    let mut controller_ids: HashMap<Key, String> = HashMap::new();
    let mut zones = Vec::new();
    let mut machine_keys = Vec::new();
    let mut controller_keys = Vec::new();
    let mut function_keys = Vec::new();

    for n in &ctx.nodes {
        let key = n.element as Key;
        match n.target {
            Some(RoleTarget::Zone) => {
                let id = ids.allocate(&n.element.name);
                zone_ids.insert(key, id.clone());
                zones.push(ZoneDescriptor {
                    zone_id: id,
                    name: n.element.name.clone(),
                    parent_zone_id: n.zone_ancestor.map(|z| zone_ids[&z].clone()),
                    machine_ids: Vec::new(),
                });
                accounting.zones += 1;
            }
            Some(RoleTarget::Machine { .. }) => {
                machine_ids.insert(key, ids.allocate(&n.element.name));
                machine_keys.push(key);
                accounting.machines += 1;
            }
            Some(RoleTarget::Controller { .. }) => {
                controller_ids.insert(key, ids.allocate(&n.element.name));
                controller_keys.push(key);
                accounting.controllers += 1;
            }
            Some(RoleTarget::Function) => {
                function_keys.push(key);
                accounting.functions += 1;
            }
            Some(RoleTarget::Ignore) | None => {}
        }
    }
    accounting.skipped = skipped.len();

    // Every InternalLink in the instance hierarchies, in document order.
    let mut links = Vec::new();
    doc.for_each_instance(|_, ie, _| links.extend(ie.internal_links.iter()));

    // function -> (machine, controller)
    let mut bindings: Vec<(Key, Key, Key)> = Vec::new();
    for &f in &function_keys {
        let fnode = ctx.node(f);
        let name = fnode.element.name.clone();
        let controller = fnode.controller_ancestor.expect("misplaced functions were skipped");
        let mut machines: Vec<Key> = Vec::new();
        for link in &links {
            let a = resolve_interface_ref(doc, &link.side_a);
            let b = resolve_interface_ref(doc, &link.side_b);
            let (Some(a), Some(b)) = (a, b) else { continue };
            let other = if std::ptr::eq(a.element, fnode.element) {
                b.element
            } else if std::ptr::eq(b.element, fnode.element) {
                a.element
            } else {
                continue;
            };
            let owner = owning_machine(&ctx, other as Key);
            if let Some(m) = owner {
                if !machines.contains(&m) {
                    machines.push(m);
                }
            }
        }
        match machines.as_slice() {
            [] => ctx.errors.push(ExtractError::UnboundFunction(name)),
            [m] => bindings.push((f, *m, controller)),
            many => ctx.errors.push(ExtractError::AmbiguousFunction {
                function: name,
                machines: many.iter().map(|m| machine_ids[m].clone()).collect(),
            }),
        }
    }

    let mut machine_controller: HashMap<Key, Key> = HashMap::new();
    for &(_, m, c) in &bindings {
        match machine_controller.get(&m) {
            Some(&prev) if prev != c => {
                let err = ExtractError::SharedMachine {
                    machine: machine_ids[&m].clone(),
                    controllers: vec![controller_ids[&prev].clone(), controller_ids[&c].clone()],
                };
                if !ctx.errors.contains(&err) {
                    ctx.errors.push(err);
                }
            }
            _ => {
                machine_controller.insert(m, c);
            }
        }
    }

    // Controllers.
    let mut controllers = Vec::new();
    for &c in &controller_keys {
        let node = ctx.node(c);
        let Some(RoleTarget::Controller { kind }) = node.target else {
            unreachable!()
        };
        let id = controller_ids[&c].clone();
        let ie = node.element;
        let host = ie.attribute_value("Host").map(str::trim).filter(|s| !s.is_empty());
        let port = ie.attribute_value("Port").map(str::trim).filter(|s| !s.is_empty());
        let (host, port) = match (host, port) {
            (Some(h), Some(p)) => (h.to_string(), p.to_string()),
            (h, _) => {
                let attribute = if h.is_none() { "Host" } else { "Port" };
                ctx.errors.push(ExtractError::MissingEndpoint {
                    controller: ie.name.clone(),
                    attribute,
                });
                continue;
            }
        };
        let port = match port.parse::<u16>() {
            Ok(p) if p > 0 => p,
            _ => {
                ctx.errors.push(invalid(&ie.name, "Port", &port, "expected 1-65535"));
                continue;
            }
        };
        let protocol_params = match kind {
            ControllerKind::ModbusPlc => {
                let unit_id = match ie.attribute_value("UnitId").map(str::trim) {
                    None | Some("") => DEFAULT_UNIT_ID,
                    Some(v) => match v.parse::<u8>() {
                        Ok(u) => u,
                        Err(_) => {
                            ctx.errors.push(invalid(&ie.name, "UnitId", v, "expected 0-255"));
                            continue;
                        }
                    },
                };
                ProtocolParams::Modbus { unit_id }
            }
            ControllerKind::RobotGateway => {
                let command_set = split_list(ie.attribute_value("CommandSet").unwrap_or(DEFAULT_COMMAND_SET));
                let home = ie
                    .attribute_value("Home")
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| "home".to_string());
                let mut positions = vec![home.clone()];
                if let Some(list) = ie.attribute_value("Positions") {
                    push_unique(&mut positions, split_list(list));
                }
                ProtocolParams::RobotGateway {
                    command_set,
                    home,
                    positions,
                }
            }
        };
        controllers.push(ControllerDescriptor {
            controller_id: id,
            name: ie.name.clone(),
            kind,
            endpoint: Endpoint { host, port },
            protocol_params,
        });
    }

    // Machines and their capabilities.
    let mut machines = Vec::new();
    let mut capabilities = Vec::new();
    let mut block_index: HashMap<Key, u16> = HashMap::new();
    let mut metadata_attrs = serde_json::Map::new();
    for &m in &machine_keys {
        let node = ctx.node(m);
        let Some(RoleTarget::Machine { kind, behavior }) = node.target else {
            unreachable!()
        };
        let (ie, zone_ancestor) = (node.element, node.zone_ancestor);
        let machine_id = machine_ids[&m].clone();
        let controller_key = machine_controller.get(&m).copied();
        let controller =
            controller_key.and_then(|c| controllers.iter_mut().find(|d| d.controller_id == controller_ids[&c]));

        let attrs: serde_json::Map<String, serde_json::Value> = ie
            .attributes
            .iter()
            .filter_map(|a| {
                a.value
                    .as_ref()
                    .map(|v| (a.name.clone(), serde_json::Value::String(v.clone())))
            })
            .collect();
        if !attrs.is_empty() {
            metadata_attrs.insert(machine_id.clone(), serde_json::Value::Object(attrs));
        }

        let functions: Vec<Key> = bindings.iter().filter(|b| b.1 == m).map(|b| b.0).collect();
        let mut signals = Vec::new();

        match controller {
            Some(ctrl) if ctrl.kind == ControllerKind::ModbusPlc => {
                let ck = controller_key.expect("controller present");
                let idx = *block_index.entry(ck).or_insert(0);
                block_index.insert(ck, idx + 1);
                let Some(base) = idx.checked_mul(REGISTER_BLOCK) else {
                    ctx.errors.push(invalid(
                        &ie.name,
                        "register block",
                        &idx.to_string(),
                        "address space exhausted",
                    ));
                    continue;
                };
                let addr = |off: u16| base.checked_add(off);
                let (Some(busy), Some(done), Some(error), Some(extra)) = (addr(0), addr(1), addr(2), addr(3)) else {
                    ctx.errors.push(invalid(
                        &ie.name,
                        "register block",
                        &base.to_string(),
                        "address space exhausted",
                    ));
                    continue;
                };
                signals.push(signal("busy", Direction::Input, ProtocolAddress::discrete(busy)));
                signals.push(signal("done", Direction::Input, ProtocolAddress::discrete(done)));
                signals.push(signal("error", Direction::Input, ProtocolAddress::discrete(error)));
                match behavior {
                    BehaviorKind::Warehouse => {
                        signals.push(int_signal("occupancy", ProtocolAddress::input(busy)));
                    }
                    BehaviorKind::IndexedLine => {
                        signals.push(int_signal("station_position", ProtocolAddress::input(busy)));
                    }
                    BehaviorKind::Punching => {
                        signals.push(signal(
                            "item_present",
                            Direction::Input,
                            ProtocolAddress::discrete(extra),
                        ));
                    }
                    BehaviorKind::Generic => {}
                }
                for (k, &f) in functions.iter().enumerate() {
                    let fnode = ctx.node(f);
                    let fie = fnode.element;
                    let Some(cap) = modbus_capability(&machine_id, &ctrl.controller_id, fie, base, k, &mut ctx.errors)
                    else {
                        continue;
                    };
                    if let InvocationSpec::Modbus { trigger, .. } = &cap.invocation {
                        signals.push(signal(
                            &format!("{}_trigger", slug(&fie.name)),
                            Direction::Output,
                            *trigger,
                        ));
                    }
                    capabilities.push(cap);
                }
                let override_errors = apply_signal_overrides(ie, &mut signals);
                ctx.errors.extend(override_errors);
            }
            Some(ctrl) => {
                signals.push(SignalDescriptor {
                    signal_id: format!("{machine_id}.busy"),
                    name: "busy".into(),
                    direction: Direction::Input,
                    data_kind: SignalKind::Boolean,
                    binding: SignalBinding::Gateway(GatewayField::Busy),
                });
                signals.push(SignalDescriptor {
                    signal_id: format!("{machine_id}.position_index"),
                    name: "position_index".into(),
                    direction: Direction::Input,
                    data_kind: SignalKind::Integer,
                    binding: SignalBinding::Gateway(GatewayField::PositionIndex),
                });
                let ProtocolParams::RobotGateway {
                    command_set, positions, ..
                } = &mut ctrl.protocol_params
                else {
                    unreachable!("robot gateway params")
                };
                for &f in &functions {
                    let fie = ctx.node(f).element;
                    let Some(cap) =
                        robot_capability(&machine_id, &ctrl.controller_id, fie, command_set, &mut ctx.errors)
                    else {
                        continue;
                    };
                    for p in &cap.params {
                        if let Some(choices) = &p.choices {
                            push_unique(positions, choices.clone());
                        }
                    }
                    capabilities.push(cap);
                }
            }
            None => {}
        }

        for s in &mut signals {
            s.signal_id = format!("{machine_id}.{}", s.name);
        }
        machines.push(MachineDescriptor {
            machine_id,
            name: ie.name.clone(),
            kind,
            behavior,
            zone_id: zone_ancestor.map(|z| zone_ids[&z].clone()),
            controller_id: controller_key.map(|c| controller_ids[&c].clone()),
            signals,
            source_element_id: ie.id.clone(),
        });
    }

    for z in &mut zones {
        z.machine_ids = machines
            .iter()
            .filter(|m| m.zone_id.as_deref() == Some(z.zone_id.as_str()))
            .map(|m| m.machine_id.clone())
            .collect();
    }

    if !ctx.errors.is_empty() {
        return Err(ExtractErrors(ctx.errors));
    }

    let plant_name = doc
        .instance_hierarchies
        .first()
        .map(|h| h.name.clone())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| doc.file_name.trim_end_matches(".aml").to_string());
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "source_file".to_string(),
        serde_json::Value::String(doc.file_name.clone()),
    );
    metadata.insert(
        "machine_attributes".to_string(),
        serde_json::Value::Object(metadata_attrs),
    );

    Ok(Extraction {
        config: PlantConfig {
            plant_id: slug(&plant_name),
            plant_name,
            machines,
            controllers,
            capabilities,
            zones,
            metadata,
        },
        warnings,
        skipped,
        accounting,
    })
}

fn owning_machine(ctx: &Ctx<'_>, key: Key) -> Option<Key> {
    let idx = *ctx.index.get(&key)?;
    let n = &ctx.nodes[idx];
    if matches!(n.target, Some(RoleTarget::Machine { .. })) {
        Some(key)
    } else {
        n.machine_ancestor
    }
}

/// Signals declared on interfaces of the machine's descendants via a `Signal`
/// attribute plus one of `Input` (discrete input), `Coil` or `Register`.
/// A declared signal replaces a conventional one of the same name.
fn apply_signal_overrides(root: &InternalElement, signals: &mut Vec<SignalDescriptor>) -> Vec<ExtractError> {
    let mut errors = Vec::new();
    let mut stack = vec![root];
    while let Some(e) = stack.pop() {
        for ei in &e.external_interfaces {
            let Some(name) = ei.attribute_value("Signal").map(str::trim).filter(|s| !s.is_empty()) else {
                continue;
            };
            let parsed = [
                ("Input", Table::DiscreteInput),
                ("Coil", Table::Coil),
                ("Register", Table::HoldingRegister),
            ]
            .iter()
            .find_map(|(attr, table)| ei.attribute_value(attr).map(|v| (*attr, *table, v.trim())));
            let Some((attr, table, raw)) = parsed else { continue };
            let Ok(address) = raw.parse::<u16>() else {
                errors.push(invalid(&e.name, attr, raw, "expected 0-65535"));
                continue;
            };
            let (direction, kind) = match table {
                Table::DiscreteInput => (Direction::Input, SignalKind::Boolean),
                Table::Coil => (Direction::Output, SignalKind::Boolean),
                _ => (Direction::Output, SignalKind::Integer),
            };
            let sd = SignalDescriptor {
                signal_id: String::new(),
                name: name.to_string(),
                direction,
                data_kind: kind,
                binding: SignalBinding::Modbus(ProtocolAddress::new(table, address)),
            };
            match signals.iter_mut().find(|s| s.name == name) {
                Some(existing) => *existing = sd,
                None => signals.push(sd),
            }
        }
        // Children in reverse so the stack yields them in document order.
        stack.extend(e.children.iter().rev());
    }
    errors
}

fn signal(name: &str, direction: Direction, addr: ProtocolAddress) -> SignalDescriptor {
    SignalDescriptor {
        signal_id: String::new(),
        name: name.to_string(),
        direction,
        data_kind: SignalKind::Boolean,
        binding: SignalBinding::Modbus(addr),
    }
}

fn int_signal(name: &str, addr: ProtocolAddress) -> SignalDescriptor {
    SignalDescriptor {
        data_kind: SignalKind::Integer,
        ..signal(name, Direction::Input, addr)
    }
}

fn invalid(element: &str, attribute: &str, value: &str, reason: &str) -> ExtractError {
    ExtractError::InvalidAttribute {
        element: element.to_string(),
        attribute: attribute.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn push_unique(into: &mut Vec<String>, items: Vec<String>) {
    for i in items {
        if !into.contains(&i) {
            into.push(i);
        }
    }
}

fn capability_common(fie: &InternalElement, errors: &mut Vec<ExtractError>) -> Option<(f64, String, Vec<ParamSpec>)> {
    let duration = match fie.attribute_value("NominalDuration").map(str::trim) {
        None | Some("") => DEFAULT_NOMINAL_DURATION_S,
        Some(v) => match v.parse::<f64>() {
            Ok(d) if d.is_finite() && d > 0.0 => d,
            _ => {
                errors.push(invalid(&fie.name, "NominalDuration", v, "expected a positive number"));
                return None;
            }
        },
    };
    let description = fie
        .attribute_value("Description")
        .unwrap_or_default()
        .trim()
        .to_string();
    let mut params = Vec::new();
    if let Some(group) = fie.attribute("Parameters") {
        for a in &group.children {
            match param_spec(a) {
                Ok(p) => params.push(p),
                Err(message) => {
                    errors.push(ExtractError::Function {
                        function: fie.name.clone(),
                        message,
                    });
                    return None;
                }
            }
        }
    }
    Some((duration, description, params))
}

fn param_spec(a: &AmlAttribute) -> Result<ParamSpec, String> {
    let data_kind = match a.data_type.as_deref().map(|t| t.trim().trim_start_matches("xs:")) {
        Some("int" | "integer" | "short" | "long" | "byte" | "unsignedShort" | "unsignedInt" | "unsignedByte") => {
            ValueKind::Integer
        }
        Some("boolean") => ValueKind::Boolean,
        Some("string") | None => ValueKind::Text,
        Some(other) => return Err(format!("parameter {} has unsupported data type {other}", a.name)),
    };
    let int_attr = |name: &str| -> Result<Option<i64>, String> {
        match find_attribute(&a.children, name).and_then(|c| c.value.as_deref()) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse::<i64>()
                .map(Some)
                .map_err(|_| format!("parameter {} has non-integer {name} {v:?}", a.name)),
        }
    };
    let range = match (int_attr("Min")?, int_attr("Max")?) {
        (None, None) => None,
        (min, max) => Some(IntRange {
            min: min.unwrap_or(i64::MIN),
            max: max.unwrap_or(i64::MAX),
        }),
    };
    let choices = find_attribute(&a.children, "Choices")
        .and_then(|c| c.value.as_deref())
        .map(split_list);
    let default = match a.value.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(v) => Some(match data_kind {
            ValueKind::Integer => Value::Int(
                v.parse()
                    .map_err(|_| format!("parameter {} has non-integer default {v:?}", a.name))?,
            ),
            ValueKind::Boolean => Value::Bool(match v {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return Err(format!("parameter {} has non-boolean default {v:?}", a.name)),
            }),
            ValueKind::Text => Value::Text(v.to_string()),
        }),
    };
    let spec = ParamSpec {
        name: a.name.clone(),
        data_kind,
        range,
        choices,
        default,
    };
    if let Some(d) = &spec.default {
        spec.check(d)?;
    }
    Ok(spec)
}

fn parse_override(fie: &InternalElement, attr: &str, errors: &mut Vec<ExtractError>) -> Result<Option<u16>, ()> {
    match fie.attribute_value(attr).map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<u16>() {
            Ok(a) => Ok(Some(a)),
            Err(_) => {
                errors.push(invalid(&fie.name, attr, v, "expected 0-65535"));
                Err(())
            }
        },
    }
}

fn modbus_capability(
    machine_id: &str,
    controller_id: &str,
    fie: &InternalElement,
    base: u16,
    k: usize,
    errors: &mut Vec<ExtractError>,
) -> Option<CapabilityDescriptor> {
    let (nominal_duration_s, description, params) = capability_common(fie, errors)?;
    let fail = |errors: &mut Vec<ExtractError>, message: String| {
        errors.push(ExtractError::Function {
            function: fie.name.clone(),
            message,
        });
    };
    if params.len() > MAX_MODBUS_PARAMS {
        fail(
            errors,
            format!("at most {MAX_MODBUS_PARAMS} parameters fit a register block"),
        );
        return None;
    }
    if let Some(p) = params.iter().find(|p| p.data_kind == ValueKind::Text) {
        fail(
            errors,
            format!(
                "parameter {} is text; Modbus parameters must be integer or boolean",
                p.name
            ),
        );
        return None;
    }
    let coil = parse_override(fie, "Coil", errors).ok()?;
    let register = parse_override(fie, "Register", errors).ok()?;
    let input = parse_override(fie, "Input", errors).ok()?;

    let offset = u16::try_from(k).ok().filter(|k| *k < REGISTER_BLOCK);
    let trigger = match (coil, offset) {
        (Some(c), _) => c,
        (None, Some(o)) => base + o,
        (None, None) => {
            fail(errors, "too many functions for one register block".into());
            return None;
        }
    };
    let first_param = register.unwrap_or(base + 1);
    let mut param_registers = Vec::new();
    for i in 0..params.len() as u16 {
        let Some(a) = first_param.checked_add(i) else {
            fail(errors, "parameter registers exceed the address space".into());
            return None;
        };
        param_registers.push(ProtocolAddress::holding(a));
    }
    let status = input.unwrap_or(base);
    let (Some(done), Some(error)) = (status.checked_add(1), status.checked_add(2)) else {
        fail(errors, "status inputs exceed the address space".into());
        return None;
    };
    Some(CapabilityDescriptor {
        capability_id: format!("{machine_id}.{}", slug(&fie.name)),
        name: fie.name.clone(),
        controller_id: controller_id.to_string(),
        machine_id: machine_id.to_string(),
        invocation: InvocationSpec::Modbus {
            trigger: ProtocolAddress::coil(trigger),
            param_registers,
            busy: ProtocolAddress::discrete(status),
            done: ProtocolAddress::discrete(done),
            error: Some(ProtocolAddress::discrete(error)),
        },
        params,
        nominal_duration_s,
        description,
    })
}

fn robot_capability(
    machine_id: &str,
    controller_id: &str,
    fie: &InternalElement,
    command_set: &[String],
    errors: &mut Vec<ExtractError>,
) -> Option<CapabilityDescriptor> {
    let (nominal_duration_s, description, params) = capability_common(fie, errors)?;
    let command = fie
        .attribute_value("Command")
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| slug(&fie.name));
    if !command_set.contains(&command) {
        errors.push(ExtractError::Function {
            function: fie.name.clone(),
            message: format!(
                "command {command:?} not in the gateway command set [{}]",
                command_set.join(", ")
            ),
        });
        return None;
    }
    Some(CapabilityDescriptor {
        capability_id: format!("{machine_id}.{}", slug(&fie.name)),
        name: fie.name.clone(),
        controller_id: controller_id.to_string(),
        machine_id: machine_id.to_string(),
        invocation: InvocationSpec::Robot {
            command,
            param_names: params.iter().map(|p| p.name.clone()).collect(),
        },
        params,
        nominal_duration_s,
        description,
    })
}
