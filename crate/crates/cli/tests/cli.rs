use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value as Json;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn twinloop(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_twinloop"));
    for (k, _) in std::env::vars() {
        if k.starts_with("TWINLOOP_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Json {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&twinloop(&[])), 2);
    assert_eq!(code(&twinloop(&["frobnicate"])), 2);
    assert_eq!(code(&twinloop(&["run", p(&fixture("process1.bpmn"))])), 2);
    assert_eq!(
        code(&twinloop(&["generate", "--plant", p(&fixture("demo_plant.aml"))])),
        2
    );
    assert_eq!(code(&twinloop(&["--help"])), 0);
}

#[test]
fn missing_input_is_a_domain_error() {
    let o = twinloop(&["run", "missing.bpmn", "--plant", p(&fixture("demo_plant.aml"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.bpmn"));
    assert_eq!(code(&twinloop(&["parse", "nope.aml"])), 1);
}

#[test]
fn extract_prints_config_and_writes_files() {
    let o = twinloop(&["extract", p(&fixture("demo_plant.aml"))]);
    assert_eq!(code(&o), 0);
    let config = stdout_json(&o);
    assert_eq!(config["schema"], "plantconfig/1");
    assert_eq!(config["machines"].as_array().unwrap().len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plant.json");
    let o = twinloop(&["--json", "extract", p(&fixture("demo_plant.aml")), "-o", p(&out)]);
    assert_eq!(code(&o), 0);
    let summary = stdout_json(&o);
    assert_eq!(
        (summary["machines"].as_u64(), summary["controllers"].as_u64()),
        (Some(4), Some(2))
    );
    assert_eq!(summary["capabilities"], 5);
    assert_eq!(
        std::fs::read(&out).unwrap(),
        twinloop(&["extract", p(&fixture("demo_plant.aml"))]).stdout
    );
}

#[test]
fn parse_json_lists_hierarchies() {
    let o = twinloop(&["--json", "parse", p(&fixture("demo_plant.aml"))]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    let names: Vec<&str> = v["hierarchies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["DemoPlant", "ControlHierarchy"]);
    assert_eq!(v["findings"], Json::Array(vec![]));
}

#[test]
fn validate_each_document_kind() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plant.json");
    std::fs::write(&config, twinloop(&["extract", p(&fixture("demo_plant.aml"))]).stdout).unwrap();
    assert_eq!(code(&twinloop(&["validate", p(&fixture("demo_plant.aml"))])), 0);
    assert_eq!(code(&twinloop(&["validate", p(&config)])), 0);
    let o = twinloop(&[
        "--json",
        "validate",
        p(&fixture("process2.bpmn")),
        "--plant",
        p(&config),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["ok"], true);

    // A task bound to a capability the plant does not have.
    let bad = dir.path().join("bad.bpmn");
    let xml = std::fs::read_to_string(fixture("process1.bpmn"))
        .unwrap()
        .replace(r#"name="Stamp""#, r#"name="Weld""#);
    std::fs::write(&bad, xml).unwrap();
    let o = twinloop(&["--json", "validate", p(&bad), "--plant", p(&config)]);
    assert_eq!(code(&o), 1);
    let v = stdout_json(&o);
    assert_eq!(v["ok"], false);
    assert!(!v["errors"].as_array().unwrap().is_empty());
}

#[test]
fn run_in_process_completes_and_streams_ndjson() {
    let o = twinloop(&[
        "--json",
        "run",
        p(&fixture("process1.bpmn")),
        "--plant",
        p(&fixture("demo_plant.aml")),
        "--watch",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let items: Vec<Json> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(items[0]["type"], "run");
    let last = items.last().unwrap();
    assert_eq!(
        (last["type"].as_str(), last["outcome"].as_str()),
        (Some("outcome"), Some("completed"))
    );
    let dispatched = items
        .iter()
        .filter(|i| i["type"] == "entry" && i["phase"] == "dispatched")
        .count();
    assert_eq!(dispatched, 6);
}

#[test]
fn generate_from_steps_writes_accepted_process() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.bpmn");
    let o = twinloop(&[
        "--json",
        "generate",
        "--plant",
        p(&fixture("demo_plant.aml")),
        "--steps",
        "LoadFromWarehouse, Stamp, StoreToWarehouse",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["phase"], "accepted");
    assert_eq!(v["run_outcome"], "completed");
    assert_eq!(v["steps"].as_array().unwrap().len(), 3);
    // The written process validates against the same plant.
    assert_eq!(
        code(&twinloop(&[
            "validate",
            p(&out),
            "--plant",
            p(&fixture("demo_plant.aml"))
        ])),
        0
    );
}

#[test]
fn telemetry_offline_needs_a_source() {
    assert_eq!(code(&twinloop(&["telemetry"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let o = twinloop(&["--json", "telemetry", "--data-dir", p(dir.path())]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o), Json::Array(vec![]));
}
