#![allow(dead_code)]

use std::sync::Arc;

use tokio::sync::broadcast;
use twinloop_core::aml::parse_caex;
use twinloop_core::plant::{extract_plant_config, PlantConfig, RoleMapping};
use twinloop_runtime::adapter::{AdapterContext, AdapterEvent};
use twinloop_runtime::clock::SimClock;
use twinloop_runtime::telemetry::TelemetryBus;
use twinloop_runtime::wire::WireTap;

pub const DEMO_AML: &str = include_str!("../../../core/fixtures/demo_plant.aml");
pub const PROCESS1: &str = include_str!("../../../core/fixtures/process1.bpmn");
pub const PROCESS2: &str = include_str!("../../../core/fixtures/process2.bpmn");
pub const PARALLEL: &str = include_str!("../../../core/fixtures/parallel.bpmn");

pub fn demo_config() -> PlantConfig {
    let doc = parse_caex(DEMO_AML).expect("demo parses");
    extract_plant_config(&doc, &RoleMapping::default())
        .expect("demo extracts")
        .config
}

pub fn context(config: &PlantConfig, clock: &SimClock) -> (AdapterContext, broadcast::Receiver<AdapterEvent>, WireTap) {
    let (events, rx) = broadcast::channel(1024);
    let tap = WireTap::new();
    let ctx = AdapterContext {
        config: Arc::new(config.clone()),
        clock: clock.clone(),
        events,
        bus: TelemetryBus::new(),
        tap: Some(tap.clone()),
    };
    (ctx, rx, tap)
}

/// Lets spawned tasks run between manual clock steps.
pub async fn settle() {
    for _ in 0..20 {
        tokio::task::yield_now().await;
    }
    tokio::time::sleep(std::time::Duration::from_millis(2)).await;
}
