//! Pure cores of the virtual plant. The network listeners that host them are
//! in `twinloop-runtime`.

pub mod behavior;
pub mod modbus;
pub mod robot;

pub use behavior::{MachineBehavior, Phase};
pub use modbus::{handle_adu, handle_pdu, FrameError, PlcState};
pub use robot::{RobotGatewayState, RobotMessage};

use crate::plant::{ControllerKind, PlantConfig};

/// Emulated state of one Modbus controller and the machines it drives.
#[derive(Debug, Clone)]
pub struct PlcEmulator {
    pub controller_id: String,
    pub plc: PlcState,
    pub behaviors: Vec<MachineBehavior>,
}

impl PlcEmulator {
    pub fn from_config(config: &PlantConfig, controller_id: &str) -> Option<Self> {
        let ctrl = config.controller(controller_id)?;
        if ctrl.kind != ControllerKind::ModbusPlc {
            return None;
        }
        let unit_id = match ctrl.protocol_params {
            crate::plant::ProtocolParams::Modbus { unit_id } => unit_id,
            _ => 0,
        };
        let mut plc = PlcState::new(unit_id);
        let behaviors: Vec<MachineBehavior> = config
            .machines_of_controller(controller_id)
            .filter_map(|m| MachineBehavior::from_config(config, &m.machine_id))
            .collect();
        for b in &behaviors {
            b.init(&mut plc);
        }
        Some(PlcEmulator {
            controller_id: controller_id.to_string(),
            plc,
            behaviors,
        })
    }

    pub fn step(&mut self, dt_s: f64) {
        for b in &mut self.behaviors {
            b.step(&mut self.plc, dt_s);
        }
    }

    pub fn handle_adu(&mut self, request: &[u8]) -> Result<Vec<u8>, FrameError> {
        handle_adu(request, &mut self.plc)
    }
}
