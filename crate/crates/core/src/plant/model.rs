use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{Value, ValueKind};

/// Extracted plant inventory that configures emulation, adapters and the engine.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub plant_id: String,
    pub plant_name: String,
    pub machines: Vec<MachineDescriptor>,
    pub controllers: Vec<ControllerDescriptor>,
    pub capabilities: Vec<CapabilityDescriptor>,
    pub zones: Vec<ZoneDescriptor>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineKind {
    Warehouse,
    ProcessingStation,
    Conveyor,
    Robot,
    Sensor,
    Actuator,
    Other,
}

/// Which emulated behavior drives the machine's registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Warehouse,
    Punching,
    IndexedLine,
    #[default]
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineDescriptor {
    pub machine_id: String,
    pub name: String,
    pub kind: MachineKind,
    #[serde(default)]
    pub behavior: BehaviorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone_id: Option<String>,
    /// Controller that owns every capability and signal of this machine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_id: Option<String>,
    pub signals: Vec<SignalDescriptor>,
    pub source_element_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Input,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Boolean,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalDescriptor {
    pub signal_id: String,
    pub name: String,
    pub direction: Direction,
    pub data_kind: SignalKind,
    pub binding: SignalBinding,
}

/// Where a signal lives on its controller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalBinding {
    Modbus(ProtocolAddress),
    Gateway(GatewayField),
}

/// Status fields exposed by the robot gateway's `status_reply`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayField {
    Busy,
    PositionIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Coil,
    DiscreteInput,
    HoldingRegister,
    InputRegister,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolAddress {
    pub table: Table,
    pub address: u16,
}

impl ProtocolAddress {
    pub const fn new(table: Table, address: u16) -> Self {
        ProtocolAddress { table, address }
    }
    pub const fn coil(address: u16) -> Self {
        Self::new(Table::Coil, address)
    }
    pub const fn discrete(address: u16) -> Self {
        Self::new(Table::DiscreteInput, address)
    }
    pub const fn holding(address: u16) -> Self {
        Self::new(Table::HoldingRegister, address)
    }
    pub const fn input(address: u16) -> Self {
        Self::new(Table::InputRegister, address)
    }
}

impl fmt::Display for ProtocolAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.table {
            Table::Coil => "coil",
            Table::DiscreteInput => "di",
            Table::HoldingRegister => "hr",
            Table::InputRegister => "ir",
        };
        write!(f, "{t}:{}", self.address)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    ModbusPlc,
    RobotGateway,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolParams {
    Modbus {
        unit_id: u8,
    },
    RobotGateway {
        command_set: Vec<String>,
        home: String,
        /// Named poses; `position_index` signals index into this list.
        positions: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerDescriptor {
    pub controller_id: String,
    pub name: String,
    pub kind: ControllerKind,
    pub endpoint: Endpoint,
    pub protocol_params: ProtocolParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub data_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<IntRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntRange {
    pub min: i64,
    pub max: i64,
}

impl ParamSpec {
    /// Checks a concrete value against kind, range and choices.
    pub fn check(&self, value: &Value) -> Result<(), String> {
        if value.kind() != self.data_kind {
            return Err(format!(
                "parameter {} expects {}, got {}",
                self.name,
                self.data_kind,
                value.kind()
            ));
        }
        if let (Some(r), Value::Int(i)) = (&self.range, value) {
            if *i < r.min || *i > r.max {
                return Err(format!("parameter {} = {i} outside [{}, {}]", self.name, r.min, r.max));
            }
        }
        if let (Some(choices), Value::Text(s)) = (&self.choices, value) {
            if !choices.iter().any(|c| c == s) {
                return Err(format!(
                    "parameter {} = {s:?} not one of {}",
                    self.name,
                    choices.join(", ")
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum InvocationSpec {
    Modbus {
        trigger: ProtocolAddress,
        param_registers: Vec<ProtocolAddress>,
        busy: ProtocolAddress,
        done: ProtocolAddress,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ProtocolAddress>,
    },
    Robot {
        command: String,
        param_names: Vec<String>,
    },
}

impl InvocationSpec {
    pub fn controller_kind(&self) -> ControllerKind {
        match self {
            InvocationSpec::Modbus { .. } => ControllerKind::ModbusPlc,
            InvocationSpec::Robot { .. } => ControllerKind::RobotGateway,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilityDescriptor {
    pub capability_id: String,
    pub name: String,
    pub controller_id: String,
    pub machine_id: String,
    pub invocation: InvocationSpec,
    pub params: Vec<ParamSpec>,
    pub nominal_duration_s: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneDescriptor {
    pub zone_id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_zone_id: Option<String>,
    pub machine_ids: Vec<String>,
}

impl PlantConfig {
    pub fn machine(&self, id: &str) -> Option<&MachineDescriptor> {
        self.machines.iter().find(|m| m.machine_id == id)
    }

    pub fn controller(&self, id: &str) -> Option<&ControllerDescriptor> {
        self.controllers.iter().find(|c| c.controller_id == id)
    }

    pub fn capability(&self, id: &str) -> Option<&CapabilityDescriptor> {
        self.capabilities.iter().find(|c| c.capability_id == id)
    }

    pub fn capabilities_of_machine<'a>(
        &'a self,
        machine_id: &'a str,
    ) -> impl Iterator<Item = &'a CapabilityDescriptor> + 'a {
        self.capabilities.iter().filter(move |c| c.machine_id == machine_id)
    }

    pub fn machines_of_controller<'a>(
        &'a self,
        controller_id: &'a str,
    ) -> impl Iterator<Item = &'a MachineDescriptor> + 'a {
        self.machines
            .iter()
            .filter(move |m| m.controller_id.as_deref() == Some(controller_id))
    }

    /// Capabilities whose name matches case-insensitively.
    pub fn capabilities_named<'a, 'n>(
        &'a self,
        name: &'n str,
    ) -> impl Iterator<Item = &'a CapabilityDescriptor> + use<'a, 'n> {
        self.capabilities
            .iter()
            .filter(move |c| c.name.eq_ignore_ascii_case(name))
    }
}
