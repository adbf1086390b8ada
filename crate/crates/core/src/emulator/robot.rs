//! Robot gateway: wire messages and the single-arm command state machine.
//!
//! The wire format is newline-delimited JSON, one [`RobotMessage`] per line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::behavior::TIME_EPSILON;
use crate::plant::{ControllerDescriptor, InvocationSpec, PlantConfig, ProtocolParams};
use crate::value::Value;

pub const DEFAULT_COMMAND_DURATION_S: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Busy,
    UnknownCommand,
    InvalidParams,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotEvent {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayPhase {
    Idle,
    Busy,
}

/// One line on the gateway connection. `request_id` is an optional client
/// correlation token echoed in the direct reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RobotMessage {
    Cmd {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
        command: String,
        #[serde(default)]
        params: BTreeMap<String, Value>,
    },
    Accepted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
        command_id: String,
    },
    Rejected {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
        reason: RejectReason,
        detail: String,
    },
    Event {
        event: RobotEvent,
        command_id: String,
        position: String,
    },
    Status {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
    },
    StatusReply {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
        phase: GatewayPhase,
        position: String,
        position_index: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        active_command_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        last_completed_command_id: Option<String>,
    },
}

impl RobotMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("robot message serializes");
        s.push('\n');
        s
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveCommand {
    pub command_id: String,
    pub command: String,
    pub params: BTreeMap<String, Value>,
    pub target: String,
    pub remaining_s: f64,
}

/// Gateway state. At most one command is active; others are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotGatewayState {
    pub command_set: Vec<String>,
    pub home: String,
    pub positions: Vec<String>,
    pub durations: BTreeMap<String, f64>,
    pub active: Option<ActiveCommand>,
    pub position: String,
    pub last_completed: Option<String>,
    next_id: u64,
}

impl RobotGatewayState {
    pub fn new(
        command_set: Vec<String>,
        home: String,
        positions: Vec<String>,
        durations: BTreeMap<String, f64>,
    ) -> Self {
        RobotGatewayState {
            command_set,
            position: home.clone(),
            home,
            positions,
            durations,
            active: None,
            last_completed: None,
            next_id: 1,
        }
    }

    /// Gateway for a robot_gateway controller; command durations come from
    /// the nominal durations of the capabilities that use each command.
    pub fn from_config(config: &PlantConfig, controller: &ControllerDescriptor) -> Option<Self> {
        let ProtocolParams::RobotGateway {
            command_set,
            home,
            positions,
        } = &controller.protocol_params
        else {
            return None;
        };
        let mut durations = BTreeMap::new();
        for cap in config
            .capabilities
            .iter()
            .filter(|c| c.controller_id == controller.controller_id)
        {
            if let InvocationSpec::Robot { command, .. } = &cap.invocation {
                durations.insert(command.clone(), cap.nominal_duration_s);
            }
        }
        Some(Self::new(
            command_set.clone(),
            home.clone(),
            positions.clone(),
            durations,
        ))
    }

    pub fn phase(&self) -> GatewayPhase {
        if self.active.is_some() {
            GatewayPhase::Busy
        } else {
            GatewayPhase::Idle
        }
    }

    pub fn position_index(&self) -> i64 {
        self.positions
            .iter()
            .position(|p| *p == self.position)
            .map_or(-1, |i| i as i64)
    }

    fn duration(&self, command: &str) -> f64 {
        self.durations
            .get(command)
            .copied()
            .or_else(|| self.durations.values().copied().reduce(f64::max))
            .unwrap_or(DEFAULT_COMMAND_DURATION_S)
    }

    fn status_reply(&self, request_id: Option<String>) -> RobotMessage {
        RobotMessage::StatusReply {
            request_id,
            phase: self.phase(),
            position: self.position.clone(),
            position_index: self.position_index(),
            active_command_id: self.active.as_ref().map(|a| a.command_id.clone()),
            last_completed_command_id: self.last_completed.clone(),
        }
    }

    /// Answers one client message. Completion events are produced later by [`step`](Self::step).
    pub fn handle(&mut self, msg: RobotMessage) -> RobotMessage {
        match msg {
            RobotMessage::Status { request_id } => self.status_reply(request_id),
            RobotMessage::Cmd {
                request_id,
                command,
                params,
            } => {
                let reject = |reason, detail: String| RobotMessage::Rejected {
                    request_id: request_id.clone(),
                    reason,
                    detail,
                };
                if let Some(a) = &self.active {
                    return reject(RejectReason::Busy, format!("command {} is active", a.command_id));
                }
                if !self.command_set.contains(&command) {
                    return reject(RejectReason::UnknownCommand, format!("unknown command {command:?}"));
                }
                let target = match command.as_str() {
                    "home" => self.home.clone(),
                    _ => match params.get("to") {
                        Some(Value::Text(t)) if self.positions.contains(t) => t.clone(),
                        Some(v) => return reject(RejectReason::InvalidParams, format!("unknown position {v}")),
                        None if command == "move" => {
                            return reject(RejectReason::InvalidParams, "missing parameter \"to\"".into())
                        }
                        None => self.position.clone(),
                    },
                };
                let command_id = format!("cmd-{}", self.next_id);
                self.next_id += 1;
                self.active = Some(ActiveCommand {
                    command_id: command_id.clone(),
                    remaining_s: self.duration(&command),
                    command,
                    params,
                    target,
                });
                RobotMessage::Accepted { request_id, command_id }
            }
            _ => RobotMessage::Rejected {
                request_id: None,
                reason: RejectReason::Malformed,
                detail: "only cmd and status are accepted".into(),
            },
        }
    }

    /// Advances the active command; returns the completion event when it finishes.
    pub fn step(&mut self, dt_s: f64) -> Option<RobotMessage> {
        let a = self.active.as_mut()?;
        a.remaining_s = (a.remaining_s - dt_s).max(0.0);
        if a.remaining_s > TIME_EPSILON {
            return None;
        }
        let done = self.active.take().expect("active command");
        self.position = done.target;
        self.last_completed = Some(done.command_id.clone());
        Some(RobotMessage::Event {
            event: RobotEvent::Completed,
            command_id: done.command_id,
            position: self.position.clone(),
        })
    }
}
