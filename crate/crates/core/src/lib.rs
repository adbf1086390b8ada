//! Core of the twinloop digital-twin platform.
//!
//! Everything in this crate is synchronous or runtime-agnostic: the CAEX
//! reader, plant-config extraction, the Modbus/robot-gateway emulator cores,
//! the BPMN token engine and the process-generation loop. Network services
//! live in `twinloop-runtime`.

pub mod aml;
pub mod bpmn;
pub mod emulator;
pub mod events;
pub mod ids;
pub mod plant;
pub mod scenario;
pub mod value;
