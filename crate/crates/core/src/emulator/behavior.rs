//! Machine behavior state machines that drive a PLC's discrete inputs and
//! input registers from its trigger coils.

use serde::{Deserialize, Serialize};

use super::modbus::PlcState;
use crate::plant::{BehaviorKind, InvocationSpec, PlantConfig, Table};

/// Remaining time at or below this counts as expired.
pub const TIME_EPSILON: f64 = 1e-9;
pub const WAREHOUSE_SLOTS: u16 = 9;
/// Occupancy at power-up: one item in slot 0.
pub const WAREHOUSE_INITIAL_OCCUPANCY: u16 = 0x0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Busy,
    DoneLatched,
    Faulted,
}

/// Side effect a capability has on machine-specific state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    None,
    WarehouseLoad,
    WarehouseStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCapability {
    pub capability_id: String,
    pub trigger: u16,
    pub param_registers: Vec<u16>,
    pub busy: u16,
    pub done: u16,
    pub error: Option<u16>,
    pub nominal_duration_s: f64,
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineBehavior {
    pub machine_id: String,
    pub kind: BehaviorKind,
    pub phase: Phase,
    pub remaining_s: f64,
    pub capabilities: Vec<BoundCapability>,
    /// Index into `capabilities` of the running or latched invocation.
    pub active: Option<usize>,
    pub fault: Option<String>,
    /// Input register for occupancy (warehouse) or station position (indexed line).
    pub status_register: Option<u16>,
    pub item_present: Option<u16>,
    pub occupancy: u16,
    prev_triggers: Vec<bool>,
    error_pulse: Option<u16>,
    run_length_s: f64,
}

impl MachineBehavior {
    /// Builds the behavior for a Modbus-driven machine. Returns `None` for
    /// machines without Modbus capabilities.
    pub fn from_config(config: &PlantConfig, machine_id: &str) -> Option<Self> {
        let machine = config.machine(machine_id)?;
        let mut capabilities = Vec::new();
        for cap in config.capabilities_of_machine(machine_id) {
            let InvocationSpec::Modbus {
                trigger,
                param_registers,
                busy,
                done,
                error,
            } = &cap.invocation
            else {
                continue;
            };
            let lname = cap.name.to_ascii_lowercase();
            let effect = match machine.behavior {
                BehaviorKind::Warehouse if lname.contains("load") || lname.contains("retrieve") => {
                    Effect::WarehouseLoad
                }
                BehaviorKind::Warehouse if lname.contains("store") => Effect::WarehouseStore,
                _ => Effect::None,
            };
            capabilities.push(BoundCapability {
                capability_id: cap.capability_id.clone(),
                trigger: trigger.address,
                param_registers: param_registers.iter().map(|r| r.address).collect(),
                busy: busy.address,
                done: done.address,
                error: error.map(|e| e.address),
                nominal_duration_s: cap.nominal_duration_s,
                effect,
            });
        }
        if capabilities.is_empty() {
            return None;
        }
        let find = |name: &str, table: Table| {
            machine.signals.iter().find_map(|s| match &s.binding {
                crate::plant::SignalBinding::Modbus(a) if s.name == name && a.table == table => Some(a.address),
                _ => None,
            })
        };
        let status_register = match machine.behavior {
            BehaviorKind::Warehouse => find("occupancy", Table::InputRegister),
            BehaviorKind::IndexedLine => find("station_position", Table::InputRegister),
            _ => None,
        };
        let item_present = match machine.behavior {
            BehaviorKind::Punching => find("item_present", Table::DiscreteInput),
            _ => None,
        };
        let n = capabilities.len();
        Some(MachineBehavior {
            machine_id: machine_id.to_string(),
            kind: machine.behavior,
            phase: Phase::Idle,
            remaining_s: 0.0,
            capabilities,
            active: None,
            fault: None,
            status_register,
            item_present,
            occupancy: if machine.behavior == BehaviorKind::Warehouse {
                WAREHOUSE_INITIAL_OCCUPANCY
            } else {
                0
            },
            prev_triggers: vec![false; n],
            error_pulse: None,
            run_length_s: 0.0,
        })
    }

    /// Writes power-up values of machine-specific registers.
    pub fn init(&self, plc: &mut PlcState) {
        self.publish(plc);
    }

    fn set_status_bits(&self, plc: &mut PlcState, busy: bool, done: bool) {
        for c in &self.capabilities {
            plc.discrete_inputs[c.busy as usize] = busy;
            plc.discrete_inputs[c.done as usize] = done;
        }
    }

    fn set_error(&self, plc: &mut PlcState, k: usize, on: bool) {
        if let Some(e) = self.capabilities[k].error {
            plc.discrete_inputs[e as usize] = on;
        }
    }

    fn fault(&mut self, plc: &mut PlcState, k: usize, reason: String) {
        log::debug!("{}: fault: {reason}", self.machine_id);
        self.phase = Phase::Faulted;
        self.fault = Some(reason);
        self.active = Some(k);
        self.remaining_s = 0.0;
        self.set_status_bits(plc, false, false);
        self.set_error(plc, k, true);
    }

    fn slot(&self, plc: &PlcState, k: usize) -> u16 {
        self.capabilities[k]
            .param_registers
            .first()
            .map_or(0, |r| plc.holding_registers[*r as usize])
    }

    /// Advances by `dt_s` seconds. A trigger rising edge seen in this step
    /// starts the capability and already consumes this step's time.
    pub fn step(&mut self, plc: &mut PlcState, dt_s: f64) {
        debug_assert!(dt_s > 0.0);
        let triggers: Vec<bool> = self
            .capabilities
            .iter()
            .map(|c| plc.coils[c.trigger as usize])
            .collect();
        let rising: Vec<usize> = (0..triggers.len())
            .filter(|&k| triggers[k] && !self.prev_triggers[k])
            .collect();

        if let Some(addr) = self.error_pulse.take() {
            if self.phase != Phase::Faulted {
                plc.discrete_inputs[addr as usize] = false;
            }
        }

        match self.phase {
            Phase::Idle => {
                if let Some(&k) = rising.first() {
                    self.start(plc, k);
                    if self.phase == Phase::Busy {
                        self.advance(plc, dt_s);
                    }
                }
                for &k in rising.iter().skip(1) {
                    self.pulse_error(plc, k);
                }
            }
            Phase::Busy | Phase::DoneLatched => {
                for &k in &rising {
                    if Some(k) != self.active {
                        self.pulse_error(plc, k);
                    }
                }
                if self.phase == Phase::DoneLatched {
                    let k = self.active.expect("latched capability");
                    if !triggers[k] {
                        self.phase = Phase::Idle;
                        self.active = None;
                        self.set_status_bits(plc, false, false);
                    }
                } else {
                    self.advance(plc, dt_s);
                }
            }
            Phase::Faulted => {
                if triggers.iter().all(|t| !t) {
                    let k = self.active.take().unwrap_or(0);
                    self.phase = Phase::Idle;
                    self.fault = None;
                    self.set_error(plc, k, false);
                }
            }
        }
        self.prev_triggers = triggers;
        self.publish(plc);
    }

    fn pulse_error(&mut self, plc: &mut PlcState, k: usize) {
        if let Some(e) = self.capabilities[k].error {
            plc.discrete_inputs[e as usize] = true;
            self.error_pulse = Some(e);
        }
    }

    fn start(&mut self, plc: &mut PlcState, k: usize) {
        let cap = &self.capabilities[k];
        match cap.effect {
            Effect::WarehouseLoad | Effect::WarehouseStore => {
                let slot = self.slot(plc, k);
                if slot >= WAREHOUSE_SLOTS {
                    return self.fault(plc, k, format!("slot {slot} out of range"));
                }
                let occupied = self.occupancy & (1 << slot) != 0;
                if cap.effect == Effect::WarehouseLoad && !occupied {
                    return self.fault(plc, k, format!("slot {slot} is empty"));
                }
                if cap.effect == Effect::WarehouseStore && occupied {
                    return self.fault(plc, k, format!("slot {slot} is occupied"));
                }
            }
            Effect::None => {}
        }
        self.phase = Phase::Busy;
        self.active = Some(k);
        self.remaining_s = cap.nominal_duration_s;
        self.run_length_s = cap.nominal_duration_s;
        self.set_status_bits(plc, true, false);
    }

    fn advance(&mut self, plc: &mut PlcState, dt_s: f64) {
        self.remaining_s = (self.remaining_s - dt_s).max(0.0);
        if self.remaining_s > TIME_EPSILON {
            return;
        }
        self.remaining_s = 0.0;
        let k = self.active.expect("busy capability");
        match self.capabilities[k].effect {
            Effect::WarehouseLoad => self.occupancy &= !(1 << self.slot(plc, k)),
            Effect::WarehouseStore => self.occupancy |= 1 << self.slot(plc, k),
            Effect::None => {}
        }
        self.phase = Phase::DoneLatched;
        self.set_status_bits(plc, false, true);
    }

    fn publish(&self, plc: &mut PlcState) {
        match self.kind {
            BehaviorKind::Warehouse => {
                if let Some(r) = self.status_register {
                    plc.input_registers[r as usize] = self.occupancy;
                }
            }
            BehaviorKind::IndexedLine => {
                if let Some(r) = self.status_register {
                    let pos = match self.phase {
                        Phase::Busy if self.remaining_s > self.run_length_s / 2.0 => 1,
                        Phase::Busy => 2,
                        _ => 0,
                    };
                    plc.input_registers[r as usize] = pos;
                }
            }
            BehaviorKind::Punching => {
                if let Some(a) = self.item_present {
                    plc.discrete_inputs[a as usize] = matches!(self.phase, Phase::Busy | Phase::DoneLatched);
                }
            }
            BehaviorKind::Generic => {}
        }
    }
}
