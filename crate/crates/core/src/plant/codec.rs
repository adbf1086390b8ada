use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::model::*;

pub const PLANT_CONFIG_SCHEMA: &str = "plantconfig/1";

/// One broken invariant, located by a JSON field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid JSON: {0}")]
    Syntax(serde_json::Error),
    #[error("missing \"schema\" field")]
    MissingSchema,
    #[error("unsupported schema {0:?}, expected {PLANT_CONFIG_SCHEMA:?}")]
    Schema(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("{}", join(.0))]
    Integrity(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Serialize)]
struct Envelope<'a> {
    schema: &'static str,
    #[serde(flatten)]
    config: &'a PlantConfig,
}

/// Pretty JSON with a leading `"schema"` key and a trailing newline.
pub fn serialize_config(config: &PlantConfig) -> String {
    let mut s = serde_json::to_string_pretty(&Envelope {
        schema: PLANT_CONFIG_SCHEMA,
        config,
    })
    .expect("plant config always serializes");
    s.push('\n');
    s
}

pub fn deserialize_config(text: &str) -> Result<PlantConfig, ConfigError> {
    let mut raw: serde_json::Value = serde_json::from_str(text).map_err(ConfigError::Syntax)?;
    let obj = raw.as_object_mut().ok_or_else(|| ConfigError::Field {
        path: ".".into(),
        message: "expected an object".into(),
    })?;
    match obj.remove("schema") {
        None => return Err(ConfigError::MissingSchema),
        Some(serde_json::Value::String(s)) if s == PLANT_CONFIG_SCHEMA => {}
        Some(other) => {
            return Err(ConfigError::Schema(match other {
                serde_json::Value::String(s) => s,
                v => v.to_string(),
            }))
        }
    }
    let config: PlantConfig = serde_path_to_error::deserialize(raw).map_err(|e| ConfigError::Field {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let violations = check_integrity(&config);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Integrity(violations))
    }
}

/// Checks every PlantConfig invariant. Empty result means the config is valid.
pub fn check_integrity(c: &PlantConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |path: String, message: &str| {
        out.push(Violation {
            path,
            message: message.to_string(),
        })
    };

    let mut seen: HashSet<String> = HashSet::new();
    let mut unique = |id: &str| seen.insert(id.to_string()) && !id.is_empty();
    for (i, m) in c.machines.iter().enumerate() {
        if !unique(&m.machine_id) {
            v(format!("machines[{i}].machine_id"), "duplicate or empty id");
        }
    }
    for (i, ctrl) in c.controllers.iter().enumerate() {
        if !unique(&ctrl.controller_id) {
            v(format!("controllers[{i}].controller_id"), "duplicate or empty id");
        }
    }
    for (i, cap) in c.capabilities.iter().enumerate() {
        if !unique(&cap.capability_id) {
            v(format!("capabilities[{i}].capability_id"), "duplicate or empty id");
        }
    }
    for (i, z) in c.zones.iter().enumerate() {
        if !unique(&z.zone_id) {
            v(format!("zones[{i}].zone_id"), "duplicate or empty id");
        }
    }

    let controllers: HashMap<&str, &ControllerDescriptor> =
        c.controllers.iter().map(|x| (x.controller_id.as_str(), x)).collect();
    let machines: HashSet<&str> = c.machines.iter().map(|m| m.machine_id.as_str()).collect();
    let zones: HashSet<&str> = c.zones.iter().map(|z| z.zone_id.as_str()).collect();

    for (i, ctrl) in c.controllers.iter().enumerate() {
        if ctrl.endpoint.port == 0 {
            v(format!("controllers[{i}].endpoint.port"), "must be 1-65535");
        }
        if ctrl.endpoint.host.trim().is_empty() {
            v(format!("controllers[{i}].endpoint.host"), "empty");
        }
        let consistent = matches!(
            (ctrl.kind, &ctrl.protocol_params),
            (ControllerKind::ModbusPlc, ProtocolParams::Modbus { .. })
                | (ControllerKind::RobotGateway, ProtocolParams::RobotGateway { .. })
        );
        if !consistent {
            v(
                format!("controllers[{i}].protocol_params"),
                "does not match controller kind",
            );
        }
    }

    for (i, m) in c.machines.iter().enumerate() {
        if let Some(z) = &m.zone_id {
            if !zones.contains(z.as_str()) {
                v(format!("machines[{i}].zone_id"), "unknown");
            }
        }
        let ctrl = match &m.controller_id {
            Some(id) => match controllers.get(id.as_str()) {
                Some(ctrl) => Some(*ctrl),
                None => {
                    v(format!("machines[{i}].controller_id"), "unknown");
                    None
                }
            },
            None => None,
        };
        let mut names = HashSet::new();
        for (j, s) in m.signals.iter().enumerate() {
            if !names.insert(s.name.as_str()) {
                v(format!("machines[{i}].signals[{j}].name"), "duplicate signal name");
            }
            let ok = matches!(
                (&s.binding, ctrl.map(|c| c.kind)),
                (SignalBinding::Modbus(_), Some(ControllerKind::ModbusPlc))
                    | (SignalBinding::Gateway(_), Some(ControllerKind::RobotGateway))
            );
            if !ok {
                v(
                    format!("machines[{i}].signals[{j}].binding"),
                    "inconsistent with the machine's controller",
                );
            }
        }
    }

    let mut cap_names: HashSet<(&str, String)> = HashSet::new();
    for (i, cap) in c.capabilities.iter().enumerate() {
        let ctrl = controllers.get(cap.controller_id.as_str());
        if ctrl.is_none() {
            v(format!("capabilities[{i}].controller_id"), "unknown");
        }
        if !machines.contains(cap.machine_id.as_str()) {
            v(format!("capabilities[{i}].machine_id"), "unknown");
        }
        if let Some(ctrl) = ctrl {
            if cap.invocation.controller_kind() != ctrl.kind {
                v(
                    format!("capabilities[{i}].invocation"),
                    "protocol does not match controller kind",
                );
            }
        }
        if !cap_names.insert((cap.machine_id.as_str(), cap.name.to_ascii_lowercase())) {
            v(
                format!("capabilities[{i}].name"),
                "duplicate capability name on machine",
            );
        }
        if !(cap.nominal_duration_s.is_finite() && cap.nominal_duration_s > 0.0) {
            v(
                format!("capabilities[{i}].nominal_duration_s"),
                "must be a positive number",
            );
        }
        if let InvocationSpec::Modbus {
            trigger,
            param_registers,
            busy,
            done,
            error,
        } = &cap.invocation
        {
            let tables = [
                ("trigger", *trigger, Table::Coil),
                ("busy", *busy, Table::DiscreteInput),
                ("done", *done, Table::DiscreteInput),
            ];
            for (name, addr, table) in tables {
                if addr.table != table {
                    v(format!("capabilities[{i}].invocation.{name}"), "wrong register table");
                }
            }
            if error.is_some_and(|e| e.table != Table::DiscreteInput) {
                v(format!("capabilities[{i}].invocation.error"), "wrong register table");
            }
            if param_registers.len() != cap.params.len() {
                v(
                    format!("capabilities[{i}].invocation.param_registers"),
                    "count differs from params",
                );
            }
            for (j, r) in param_registers.iter().enumerate() {
                if r.table != Table::HoldingRegister {
                    v(
                        format!("capabilities[{i}].invocation.param_registers[{j}]"),
                        "wrong register table",
                    );
                }
            }
        }
        let mut pnames = HashSet::new();
        for (j, p) in cap.params.iter().enumerate() {
            if !pnames.insert(p.name.as_str()) {
                v(
                    format!("capabilities[{i}].params[{j}].name"),
                    "duplicate parameter name",
                );
            }
        }
    }

    for (i, z) in c.zones.iter().enumerate() {
        if let Some(p) = &z.parent_zone_id {
            if !zones.contains(p.as_str()) {
                v(format!("zones[{i}].parent_zone_id"), "unknown");
            }
        }
        for (j, m) in z.machine_ids.iter().enumerate() {
            if !machines.contains(m.as_str()) {
                v(format!("zones[{i}].machine_ids[{j}]"), "unknown");
            }
        }
    }
    out
}
