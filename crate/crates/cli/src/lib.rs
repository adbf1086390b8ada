//! `twinloop` command-line driver.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod client;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;
use serde::Serialize;
use serde_json::json;
use twinloop_core::aml::{parse_caex, validate_structure, CaexDocument, InternalElement, Severity};
use twinloop_core::bpmn::{bind_process, parse_bpmn, EntryPhase, ParseMode, RunOutcome};
use twinloop_core::events::{Millis, Mode};
use twinloop_core::plant::{
    check_integrity, deserialize_config, extract_plant_config, serialize_config, Endpoint, PlantConfig, RoleMapping,
};
use twinloop_core::scenario::{BackendKind, LoopAction, LoopPhase};
use twinloop_core::value::Value;
use twinloop_runtime::clock::ClockOptions;
use twinloop_runtime::config::ServiceConfig;
use twinloop_runtime::plant::PortPolicy;
use twinloop_runtime::service::{CreateScenario, DeployRequest, DeploymentStatus, Orchestrator, StartRun, StreamItem};

pub use client::Api;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "twinloop",
    version,
    about = "Digital twin pipeline driver",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,
    /// Talk to a running service instead of working in-process.
    #[arg(long, global = true, env = "TWINLOOP_SERVER")]
    server: Option<String>,
    /// Service configuration file (TOML) for in-process work and `serve`.
    #[arg(long, global = true, env = "TWINLOOP_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse an AML file and print its hierarchy.
    Parse { file: PathBuf },
    /// Extract the plant config from an AML file.
    Extract {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Role mapping JSON replacing the built-in one.
        #[arg(long)]
        roles: Option<PathBuf>,
    },
    /// Validate an AML file, a plant config or a BPMN process.
    Validate {
        file: PathBuf,
        /// Plant (AML or config JSON) to validate a BPMN process against.
        #[arg(long)]
        plant: Option<PathBuf>,
    },
    /// Run the orchestrator HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Ingest a plant and deploy its twin.
    Deploy(DeployArgs),
    /// Execute a BPMN process.
    Run(RunArgs),
    /// Drive the process-generation loop.
    Generate(GenerateArgs),
    /// Query or follow telemetry.
    Telemetry(TelemetryArgs),
}

#[derive(Debug, Args)]
struct TargetArgs {
    /// Physical mode: adapters connect to the configured (or overridden) endpoints.
    #[arg(long, conflicts_with = "virtual_")]
    physical: bool,
    /// Virtual mode (the default).
    #[arg(long = "virtual", id = "virtual_")]
    virtual_: bool,
    /// Endpoint override for physical mode, `controller=host:port`.
    #[arg(long = "endpoint", value_name = "CONTROLLER=HOST:PORT")]
    endpoints: Vec<String>,
    /// Registration retry budget.
    #[arg(long)]
    retry: Option<u32>,
}

#[derive(Debug, Args)]
struct DeployArgs {
    /// AML plant model.
    plant: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    /// In-process: return after deploying instead of serving until Ctrl-C.
    #[arg(long)]
    detach: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    bpmn: PathBuf,
    /// AML plant model to deploy (not needed with --deployment).
    #[arg(long)]
    plant: Option<PathBuf>,
    /// Existing deployment on the server.
    #[arg(long)]
    deployment: Option<String>,
    #[command(flatten)]
    target: TargetArgs,
    /// Process variable, `name=value`.
    #[arg(long = "var", value_name = "NAME=VALUE")]
    vars: Vec<String>,
    /// Stream run entries and events while it executes.
    #[arg(long)]
    watch: bool,
    /// In-process: keep simulated time at wall speed instead of fast-forward.
    #[arg(long)]
    realtime: bool,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// AML plant model.
    #[arg(long)]
    plant: PathBuf,
    /// Ordered capability steps, e.g. "LoadFromWarehouse, Stamp".
    #[arg(long, conflicts_with = "goal", required_unless_present = "goal")]
    steps: Option<String>,
    /// Free-text goal (needs an LLM backend).
    #[arg(long)]
    goal: Option<String>,
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Stop after the simulation instead of accepting.
    #[arg(long)]
    no_accept: bool,
    /// Write the final BPMN here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TelemetryArgs {
    #[arg(long, default_value = "#")]
    filter: String,
    #[arg(long)]
    from: Option<Millis>,
    #[arg(long)]
    to: Option<Millis>,
    /// Stream live samples instead of querying stored ones.
    #[arg(long)]
    follow: bool,
    /// In-process: read stored history from this data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| "expected template_offline, replay_fixture or remote_http".into())
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match rt.block_on(dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("twinloop: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|_| CliError::Domain(format!("{}: not UTF-8", path.display())))
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn print_line(v: &impl Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(v).expect("output serializes"));
    let _ = out.flush();
}

async fn dispatch(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Parse { file } => parse_cmd(&file, json),
        Command::Extract { file, output, roles } => extract_cmd(&file, output.as_deref(), roles.as_deref(), json),
        Command::Validate { file, plant } => validate_cmd(&file, plant.as_deref(), json),
        Command::Serve { bind, data_dir } => serve_cmd(cli.config.as_deref(), bind, data_dir, json).await,
        Command::Deploy(args) => deploy_cmd(cli.server.as_deref(), cli.config.as_deref(), args, json).await,
        Command::Run(args) => run_cmd(cli.server.as_deref(), cli.config.as_deref(), args, json).await,
        Command::Generate(args) => generate_cmd(cli.server.as_deref(), cli.config.as_deref(), args, json).await,
        Command::Telemetry(args) => telemetry_cmd(cli.server.as_deref(), cli.config.as_deref(), args, json).await,
    }
}

// ---- offline commands ----

fn load_caex(path: &Path) -> Result<CaexDocument> {
    parse_caex(&read_text(path)?).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

/// A plant from AML or from plant-config JSON.
fn load_plant(path: &Path) -> Result<PlantConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        return deserialize_config(&read_text(path)?).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())));
    }
    let doc = load_caex(path)?;
    extract_plant_config(&doc, &RoleMapping::default())
        .map(|x| x.config)
        .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct TreeNode {
    name: String,
    id: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    roles: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    children: Vec<TreeNode>,
}

fn tree(e: &InternalElement) -> TreeNode {
    TreeNode {
        name: e.name.clone(),
        id: e.id.clone(),
        roles: e.role_requirements.clone(),
        children: e.children.iter().map(tree).collect(),
    }
}

fn print_tree(nodes: &[TreeNode], depth: usize) {
    for n in nodes {
        let role = n.roles.first().and_then(|r| r.rsplit('/').next()).unwrap_or("");
        let role = if role.is_empty() {
            String::new()
        } else {
            format!("  [{role}]")
        };
        println!("{:indent$}{}{role}", "", n.name, indent = depth * 2);
        print_tree(&n.children, depth + 1);
    }
}

fn parse_cmd(file: &Path, json: bool) -> Result<()> {
    let doc = load_caex(file)?;
    let findings = validate_structure(&doc).findings;
    let hierarchies: Vec<_> = doc
        .instance_hierarchies
        .iter()
        .map(|h| (h.name.clone(), h.internal_elements.iter().map(tree).collect::<Vec<_>>()))
        .collect();
    if json {
        print_json(&json!({
            "file_name": doc.file_name,
            "schema_version": doc.schema_version,
            "hierarchies": hierarchies.iter().map(|(name, t)| json!({"name": name, "elements": t})).collect::<Vec<_>>(),
            "libraries": {
                "role_class": doc.role_class_libs.len(),
                "system_unit_class": doc.system_unit_class_libs.len(),
                "interface_class": doc.interface_class_libs.len(),
            },
            "findings": findings,
        }));
        return Ok(());
    }
    let version = doc
        .schema_version
        .as_deref()
        .map(|v| format!(" (CAEX {v})"))
        .unwrap_or_default();
    println!("{}{version}", doc.file_name);
    for (name, t) in &hierarchies {
        println!("InstanceHierarchy {name}");
        print_tree(t, 1);
    }
    println!(
        "libraries: {} role class, {} system unit class, {} interface class",
        doc.role_class_libs.len(),
        doc.system_unit_class_libs.len(),
        doc.interface_class_libs.len()
    );
    let errors = findings.iter().filter(|f| f.severity == Severity::Error).count();
    println!("findings: {errors} error(s), {} warning(s)", findings.len() - errors);
    for f in &findings {
        println!("  {:?} {}: {}", f.severity, f.element_path, f.message);
    }
    Ok(())
}

fn extract_cmd(file: &Path, output: Option<&Path>, roles: Option<&Path>, json: bool) -> Result<()> {
    let doc = load_caex(file)?;
    let mapping = match roles {
        None => RoleMapping::default(),
        Some(p) => {
            RoleMapping::from_json(&read_text(p)?).map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))?
        }
    };
    let x = extract_plant_config(&doc, &mapping).map_err(|e| CliError::Domain(format!("{}: {e}", file.display())))?;
    let text = serialize_config(&x.config);
    let Some(out) = output else {
        print!("{text}");
        for w in &x.warnings {
            eprintln!("warning: {w}");
        }
        return Ok(());
    };
    std::fs::write(out, &text).map_err(|e| CliError::Domain(format!("{}: {e}", out.display())))?;
    if json {
        print_json(&json!({
            "output": out,
            "plant_id": x.config.plant_id,
            "machines": x.config.machines.len(),
            "controllers": x.config.controllers.len(),
            "capabilities": x.config.capabilities.len(),
            "warnings": x.warnings,
        }));
    } else {
        println!(
            "wrote {}: {} machines, {} controllers, {} capabilities",
            out.display(),
            x.config.machines.len(),
            x.config.controllers.len(),
            x.config.capabilities.len()
        );
        for w in &x.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

fn validate_cmd(file: &Path, plant: Option<&Path>, json: bool) -> Result<()> {
    let text = read_text(file)?;
    let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
    let (kind, subject, errors, warnings): (&str, String, Vec<String>, Vec<String>) = if ext == "json" {
        match deserialize_config(&text) {
            Ok(c) => (
                "plant_config",
                c.plant_id.clone(),
                check_integrity(&c).iter().map(ToString::to_string).collect(),
                vec![],
            ),
            Err(e) => ("plant_config", String::new(), vec![e.to_string()], vec![]),
        }
    } else if ext == "bpmn" || (text.contains("definitions") && !text.contains("CAEXFile")) {
        match parse_bpmn(&text, ParseMode::Lenient) {
            Err(e) => ("bpmn", String::new(), vec![e.to_string()], vec![]),
            Ok(parsed) => {
                let mut warnings: Vec<String> = parsed.warnings.iter().map(ToString::to_string).collect();
                let mut errors = Vec::new();
                match plant {
                    Some(p) => {
                        let (_, report) = bind_process(&parsed.process, &load_plant(p)?);
                        errors = report.errors;
                        warnings.extend(report.warnings);
                    }
                    None => warnings.push("no --plant given: capability bindings not checked".into()),
                }
                ("bpmn", parsed.process.process_id, errors, warnings)
            }
        }
    } else {
        let doc = load_caex(file)?;
        let findings = validate_structure(&doc).findings;
        let mut errors: Vec<String> = Vec::new();
        let mut warnings = Vec::new();
        for f in findings {
            let line = format!("{}: {}", f.element_path, f.message);
            if f.severity == Severity::Error {
                errors.push(line)
            } else {
                warnings.push(line)
            }
        }
        match extract_plant_config(&doc, &RoleMapping::default()) {
            Ok(x) => warnings.extend(x.warnings),
            Err(e) => errors.extend(e.0.iter().map(ToString::to_string)),
        }
        ("aml", doc.file_name, errors, warnings)
    };
    let ok = errors.is_empty();
    if json {
        print_json(&json!({"kind": kind, "subject": subject, "ok": ok, "errors": errors, "warnings": warnings}));
    } else {
        println!("{kind} {subject}: {}", if ok { "valid" } else { "INVALID" });
        for e in &errors {
            println!("  error: {e}");
        }
        for w in &warnings {
            println!("  warning: {w}");
        }
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "{} has {} error(s)",
            file.display(),
            errors.len()
        )))
    }
}

// ---- service-backed commands ----

fn service_config(path: Option<&Path>) -> Result<ServiceConfig> {
    ServiceConfig::load(path, std::env::vars()).map_err(|e| CliError::Usage(e.to_string()))
}

/// An in-process orchestrator over a throwaway data directory unless the
/// config names one.
struct Local {
    api: Api,
    _dir: Option<tempfile::TempDir>,
}

fn local(config: Option<&Path>, tune: impl FnOnce(&mut ServiceConfig)) -> Result<Local> {
    let mut cfg = match config {
        Some(_) => service_config(config)?,
        None => {
            let mut c = service_config(None)?;
            c.ports = PortPolicy::Ephemeral;
            c
        }
    };
    let explicit_dir = config.is_some() || std::env::var_os("TWINLOOP_DATA_DIR").is_some();
    let dir = if explicit_dir {
        None
    } else {
        let d = tempfile::tempdir().map_err(|e| CliError::Domain(format!("temp dir: {e}")))?;
        cfg.data_dir = d.path().to_path_buf();
        Some(d)
    };
    tune(&mut cfg);
    let orch = Orchestrator::open(cfg)?;
    Ok(Local {
        api: Api::Local { orch },
        _dir: dir,
    })
}

fn deploy_request(t: &TargetArgs) -> Result<DeployRequest> {
    let mut endpoints = BTreeMap::new();
    for spec in &t.endpoints {
        let (ctrl, addr) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--endpoint {spec:?}: expected CONTROLLER=HOST:PORT")))?;
        let (host, port) = addr
            .rsplit_once(':')
            .and_then(|(h, p)| Some((h, p.parse::<u16>().ok()?)))
            .ok_or_else(|| CliError::Usage(format!("--endpoint {spec:?}: expected CONTROLLER=HOST:PORT")))?;
        endpoints.insert(
            ctrl.to_string(),
            Endpoint {
                host: host.into(),
                port,
            },
        );
    }
    if !endpoints.is_empty() && !t.physical {
        return Err(CliError::Usage("--endpoint only applies with --physical".into()));
    }
    Ok(DeployRequest {
        mode: Some(if t.physical { Mode::Physical } else { Mode::Virtual }),
        endpoints,
        retry_attempts: t.retry,
        wire_tap: false,
    })
}

fn parse_var(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--var {s:?}: expected NAME=VALUE")))?;
    let value = match v {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => v
            .parse::<i64>()
            .map(Value::Int)
            .unwrap_or_else(|_| Value::Text(v.into())),
    };
    Ok((k.to_string(), value))
}

fn print_deployment(d: &twinloop_runtime::service::DeploymentView, json: bool) {
    if json {
        print_json(d);
        return;
    }
    println!(
        "deployment {} ({:?}, plant {}): {:?}",
        d.deployment_id, d.mode, d.plant_id, d.status
    );
    for e in &d.endpoints {
        println!(
            "  {} listening on {}:{}",
            e.controller_id, e.endpoint.host, e.endpoint.port
        );
    }
    for a in &d.adapters {
        let state = if a.registered {
            "registered".to_string()
        } else {
            a.detail.clone().unwrap_or_default()
        };
        println!(
            "  {} -> {}:{} {state}",
            a.adapter_id, a.target_endpoint.host, a.target_endpoint.port
        );
    }
    if let Some(e) = &d.error {
        println!("  error: {e}");
    }
}

async fn serve_cmd(config: Option<&Path>, bind: Option<String>, data_dir: Option<PathBuf>, json: bool) -> Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let mut cfg = service_config(config)?;
    if let Some(b) = bind {
        cfg.bind = b;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    let orch = Orchestrator::open(cfg.clone())?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind)
        .await
        .map_err(|e| CliError::Domain(format!("cannot listen on {}: {e}", cfg.bind)))?;
    let addr = listener.local_addr().map_err(|e| CliError::Domain(e.to_string()))?;
    if json {
        print_line(&json!({"listening": format!("http://{addr}/api/v1"), "data_dir": cfg.data_dir}));
    } else {
        println!(
            "twinloop serving http://{addr}/api/v1 (data in {})",
            cfg.data_dir.display()
        );
    }
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    twinloop_runtime::api::serve(orch.clone(), listener, shutdown)
        .await
        .map_err(|e| CliError::Domain(e.to_string()))?;
    orch.shutdown();
    Ok(())
}

async fn deploy_cmd(server: Option<&str>, config: Option<&Path>, args: DeployArgs, json: bool) -> Result<()> {
    let req = deploy_request(&args.target)?;
    let aml = read(&args.plant)?;
    let (api, _keep) = match server {
        Some(url) => (Api::remote(url), None),
        None => {
            let l = local(config, |c| {
                if config.is_none() {
                    c.ports = PortPolicy::Defaults;
                }
            })?;
            (l.api, l._dir)
        }
    };
    let plant = api.ingest(aml).await?;
    let view = api.deploy(&plant.plant_id, &req).await?;
    print_deployment(&view, json);
    if view.status != DeploymentStatus::Ready {
        return Err(CliError::Domain(format!(
            "deployment {} is {:?}",
            view.deployment_id, view.status
        )));
    }
    if server.is_none() && !args.detach {
        if !json {
            println!("serving the twin until Ctrl-C");
        }
        let _ = tokio::signal::ctrl_c().await;
    }
    Ok(())
}

async fn run_cmd(server: Option<&str>, config: Option<&Path>, args: RunArgs, json: bool) -> Result<()> {
    let xml = read(&args.bpmn)?;
    let vars = args
        .vars
        .iter()
        .map(|v| parse_var(v))
        .collect::<Result<BTreeMap<_, _>>>()?;
    if args.plant.is_none() && args.deployment.is_none() {
        return Err(CliError::Usage(
            "run needs --plant (or --deployment with --server)".into(),
        ));
    }
    if args.deployment.is_some() && server.is_none() {
        return Err(CliError::Usage("--deployment needs --server".into()));
    }
    let req = deploy_request(&args.target)?;
    let (api, _keep) = match server {
        Some(url) => (Api::remote(url), None),
        None => {
            let realtime = args.realtime;
            let l = local(config, |c| {
                if config.is_none() && !realtime {
                    c.clock = ClockOptions::fast_forward(c.simulation_clock.step_s, c.simulation_clock.pace_ms);
                }
            })?;
            (l.api, l._dir)
        }
    };
    let deployment_id = match (&args.deployment, &args.plant) {
        (Some(d), _) => d.clone(),
        (None, Some(plant)) => {
            let ingested = api.ingest(read(plant)?).await?;
            let existing = api
                .deployments()
                .await?
                .into_iter()
                .find(|d| d.plant_id == ingested.plant_id && d.status != DeploymentStatus::Stopped);
            let view = match existing {
                Some(d) => d,
                None => api.deploy(&ingested.plant_id, &req).await?,
            };
            if view.status != DeploymentStatus::Ready {
                print_deployment(&view, json);
                return Err(CliError::Domain(format!(
                    "deployment {} is {:?}",
                    view.deployment_id, view.status
                )));
            }
            view.deployment_id
        }
        (None, None) => unreachable!("checked above"),
    };
    let upload = api.upload_process(xml).await?;
    for w in &upload.warnings {
        eprintln!("warning: {w}");
    }
    let run = api
        .start_run(
            &deployment_id,
            &StartRun {
                process_doc: upload.doc_id,
                vars,
            },
        )
        .await?;
    if !json && args.watch {
        println!("run {} of {} on {deployment_id}", run.run_id, run.process_id);
    }
    let mut events = api.events(&run.run_id).await?;
    let mut final_outcome = None;
    while let Some(item) = events.next().await {
        let item = item?;
        if args.watch {
            if json {
                print_line(&item);
            } else {
                print_item(&item);
            }
        }
        if let StreamItem::Outcome { outcome, detail, .. } = &item {
            final_outcome = Some((*outcome, detail.clone()));
        }
    }
    let record = api.run(&run.run_id).await?;
    if !args.watch {
        if json {
            print_json(&record);
        } else {
            println!(
                "run {}: {}",
                record.run_id,
                record.outcome.map_or("unfinished", RunOutcome::as_str)
            );
        }
    }
    match final_outcome {
        Some((RunOutcome::Completed, _)) => Ok(()),
        Some((o, detail)) => Err(CliError::Domain(
            format!("run {} {} {detail}", run.run_id, o.as_str()).trim_end().into(),
        )),
        None => Err(CliError::Domain(format!(
            "run {}: event stream ended without an outcome",
            run.run_id
        ))),
    }
}

fn print_item(item: &StreamItem) {
    match item {
        StreamItem::Run { .. } => {}
        StreamItem::Entry { entry } => {
            let marker = match entry.phase {
                EntryPhase::Entered => "  ",
                EntryPhase::Dispatched => "->",
                EntryPhase::Completed => "ok",
                EntryPhase::Failed => "!!",
            };
            let detail = if entry.detail.is_empty() {
                String::new()
            } else {
                format!("  {}", entry.detail)
            };
            println!("{:>10} {marker} {}{detail}", entry.at, entry.node_id);
        }
        StreamItem::Event { adapter_id, event } => {
            let cmd = event.command_id.as_deref().unwrap_or("-");
            println!(
                "{:>10}    {} {} {cmd} {}",
                event.at,
                adapter_id,
                event.kind.as_str(),
                event.detail
            );
        }
        StreamItem::Outcome { outcome, detail, .. } => println!("outcome: {} {detail}", outcome.as_str()),
    }
}

async fn generate_cmd(server: Option<&str>, config: Option<&Path>, args: GenerateArgs, json: bool) -> Result<()> {
    let aml = read(&args.plant)?;
    let goal = match (&args.steps, &args.goal) {
        (Some(s), _) => format!("steps: [{}]", s.trim().trim_start_matches('[').trim_end_matches(']')),
        (None, Some(g)) => g.clone(),
        (None, None) => unreachable!("clap requires one"),
    };
    let (api, _keep) = match server {
        Some(url) => (Api::remote(url), None),
        None => {
            let l = local(config, |_| {})?;
            (l.api, l._dir)
        }
    };
    let plant = api.ingest(aml).await?;
    let sc = api
        .create_scenario(&CreateScenario {
            plant_id: plant.plant_id,
            goal,
            backend: args.backend,
        })
        .await?;
    let id = sc.record.scenario_id.clone();
    let mut steps = Vec::new();
    let mut actions = vec![LoopAction::Generate, LoopAction::Simulate];
    if !args.no_accept {
        actions.push(LoopAction::Accept);
    }
    let mut last = sc;
    for action in actions {
        let name = format!("{:?}", action.kind()).to_lowercase();
        let r = api.scenario_action(&id, action).await?;
        if !json {
            println!("{name}: {} -> {}", r.transition.from, r.transition.to);
        }
        steps.push(json!({"action": name, "from": r.transition.from, "to": r.transition.to}));
        last = r.scenario;
        if last.record.phase == LoopPhase::Drafting {
            break;
        }
    }
    let entry = last.state.latest();
    let xml = entry.and_then(|e| e.bpmn_xml.clone());
    if let (Some(out), Some(xml)) = (&args.output, &xml) {
        std::fs::write(out, xml).map_err(|e| CliError::Domain(format!("{}: {e}", out.display())))?;
    }
    let run_outcome = entry.and_then(|e| e.run_log.as_ref()).and_then(|l| l.outcome);
    if json {
        print_json(&json!({
            "scenario_id": id,
            "phase": last.record.phase,
            "steps": steps,
            "iterations": last.state.history.len(),
            "validation": entry.map(|e| &e.validation),
            "run_outcome": run_outcome,
            "accepted_process_doc": last.record.accepted_process_doc,
            "output": args.output,
        }));
    } else {
        println!(
            "scenario {id}: {} after {} iteration(s)",
            last.record.phase,
            last.state.history.len()
        );
        if let Some(e) = entry {
            for err in &e.validation.errors {
                println!("  validation error: {err}");
            }
        }
        if let Some(doc) = &last.record.accepted_process_doc {
            println!("  accepted process stored as {doc}");
        }
    }
    let wanted = if args.no_accept {
        LoopPhase::AwaitingReview
    } else {
        LoopPhase::Accepted
    };
    if last.record.phase == wanted {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "scenario {id} ended in phase {}",
            last.record.phase
        )))
    }
}

async fn telemetry_cmd(server: Option<&str>, config: Option<&Path>, args: TelemetryArgs, json: bool) -> Result<()> {
    let show = |s: &twinloop_core::events::TelemetrySample| {
        if json {
            print_line(s);
        } else {
            println!("{:>14} {} = {}", s.at, s.topic, s.value);
        }
    };
    if let Some(url) = server {
        let api = Api::remote(url);
        if args.follow {
            let mut live = api.telemetry_stream(&args.filter).await?;
            while let Some(s) = live.next().await {
                show(&s?);
            }
        } else {
            let samples = api.telemetry(&args.filter, args.from, args.to).await?;
            if json {
                print_json(&samples);
            } else {
                samples.iter().for_each(show);
            }
        }
        return Ok(());
    }
    if args.follow {
        return Err(CliError::Usage("--follow needs --server".into()));
    }
    // Offline: read the history file of a data directory.
    let dir = match (&args.data_dir, config) {
        (Some(d), _) => d.clone(),
        (None, Some(_)) => service_config(config)?.data_dir,
        (None, None) => return Err(CliError::Usage("telemetry needs --server or --data-dir".into())),
    };
    let path = dir.join("telemetry.ndjson");
    let store = twinloop_runtime::telemetry::TelemetryStore::in_memory(usize::MAX);
    if path.exists() {
        for line in read_text(&path)?.lines() {
            if let Ok(s) = serde_json::from_str(line) {
                store.append(&s);
            }
        }
    }
    let samples = store
        .query(&args.filter, args.from, args.to)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    if json {
        print_json(&samples);
    } else {
        samples.iter().for_each(show);
    }
    Ok(())
}
