//! Network side of twinloop: emulator servers, middleware adapters,
//! telemetry, persistence and the orchestrator HTTP API.

pub mod adapter;
pub mod api;
pub mod clock;
pub mod config;
pub mod llm;
pub mod plant;
pub mod service;
pub mod store;
pub mod telemetry;
pub mod wire;
