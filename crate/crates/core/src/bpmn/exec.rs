//! Runs a bound process against a command dispatcher.

use std::collections::BTreeMap;

use async_trait::async_trait;
use futures::future::BoxFuture;
use futures::stream::{FuturesUnordered, StreamExt};

use super::expr::{evaluate_condition, Vars};
use super::model::{BpmnProcess, NodeKind};
use super::runlog::{EntryPhase, LogEntry, RunLog, RunOutcome};
use super::token::TokenMachine;
use crate::events::{CommandEnvelope, Millis, Mode, RunEventKind};
use crate::plant::PlantConfig;

/// Task timeout is this multiple of the nominal duration plus [`TIMEOUT_SLACK_S`].
pub const TIMEOUT_FACTOR: f64 = 3.0;
pub const TIMEOUT_SLACK_S: f64 = 2.0;
pub const DEFAULT_TIMEOUT_S: f64 = 30.0;
pub const DEFAULT_MAX_FIRINGS: u64 = 10_000;

/// Result of submitting one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dispatch {
    Rejected {
        reason: String,
        detail: String,
    },
    /// Terminal event of an accepted command.
    Finished {
        kind: RunEventKind,
        detail: String,
    },
}

impl Dispatch {
    pub fn completed() -> Self {
        Dispatch::Finished {
            kind: RunEventKind::Completed,
            detail: String::new(),
        }
    }

    pub fn rejected(reason: &str) -> Self {
        Dispatch::Rejected {
            reason: reason.to_string(),
            detail: String::new(),
        }
    }
}

#[async_trait]
pub trait Dispatcher: Send + Sync {
    fn now(&self) -> Millis;

    /// Submits a command and resolves with its terminal outcome, or with the
    /// rejection if the adapter refused it.
    async fn dispatch(&self, cmd: CommandEnvelope) -> Dispatch;

    /// Waits until the machine behind `capability_id` is no longer busy.
    /// Returns false if it is still busy after `max_wait_s`.
    async fn wait_idle(&self, capability_id: &str, max_wait_s: f64) -> bool;

    /// Observes each entry as it is appended.
    fn record(&self, _entry: &LogEntry) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecPolicy {
    pub fail_fast: bool,
    pub timeouts: BTreeMap<String, f64>,
    pub default_timeout_s: f64,
    /// Bounded wait before the single busy retry.
    pub busy_wait_s: f64,
    /// Node firings after which the run fails with `step_limit`.
    pub max_firings: u64,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        ExecPolicy {
            fail_fast: true,
            timeouts: BTreeMap::new(),
            default_timeout_s: DEFAULT_TIMEOUT_S,
            busy_wait_s: DEFAULT_TIMEOUT_S,
            max_firings: DEFAULT_MAX_FIRINGS,
        }
    }
}

impl ExecPolicy {
    /// Per-capability timeouts of `nominal * TIMEOUT_FACTOR + TIMEOUT_SLACK_S`.
    pub fn for_config(config: &PlantConfig) -> Self {
        let timeouts: BTreeMap<String, f64> = config
            .capabilities
            .iter()
            .map(|c| {
                (
                    c.capability_id.clone(),
                    c.nominal_duration_s * TIMEOUT_FACTOR + TIMEOUT_SLACK_S,
                )
            })
            .collect();
        let longest = timeouts.values().copied().fold(0.0, f64::max);
        ExecPolicy {
            busy_wait_s: longest.max(DEFAULT_TIMEOUT_S),
            timeouts,
            ..Default::default()
        }
    }

    pub fn timeout_for(&self, capability_id: &str) -> f64 {
        self.timeouts
            .get(capability_id)
            .copied()
            .unwrap_or(self.default_timeout_s)
    }
}

struct TaskResult {
    node: usize,
    ok: bool,
    detail: String,
}

struct Run<'a> {
    p: &'a BpmnProcess,
    d: &'a dyn Dispatcher,
    log: RunLog,
}

impl Run<'_> {
    fn entry(&mut self, node: usize, phase: EntryPhase, detail: impl Into<String>) {
        let prev = self.log.entries.last().map_or(0, |e| e.at);
        let e = LogEntry {
            at: self.d.now().max(prev),
            node_id: self.p.nodes[node].node_id.clone(),
            phase,
            detail: detail.into(),
        };
        self.d.record(&e);
        self.log.push(e).expect("entries are clamped to be time-ordered");
    }
}

/// Executes `p` with token semantics. Tasks must carry a resolved
/// `capability_id` (see [`bind_process`](super::bind_process)).
pub async fn execute(
    p: &BpmnProcess,
    dispatcher: &dyn Dispatcher,
    vars: &Vars,
    policy: &ExecPolicy,
    run_id: &str,
    mode: Mode,
) -> RunLog {
    let mut run = Run {
        p,
        d: dispatcher,
        log: RunLog::new(run_id, &p.process_id, mode),
    };
    let mut tm = TokenMachine::new(p);
    let mut in_flight: FuturesUnordered<BoxFuture<'_, TaskResult>> = FuturesUnordered::new();
    let mut seq = 0u64;
    let mut failure: Option<String> = None;
    let mut firings = 0u64;

    let Some(start) = tm.fire_start() else {
        run.log.finish(RunOutcome::Failed, "missing start event").ok();
        return run.log;
    };
    run.entry(start, EntryPhase::Entered, "");
    firings += 1;

    'run: loop {
        while let Some(n) = tm.next_enabled() {
            if firings >= policy.max_firings {
                failure = Some(format!("step_limit: more than {} node firings", policy.max_firings));
                break 'run;
            }
            firings += 1;
            let node = &p.nodes[n];
            tm.take(n);
            run.entry(n, EntryPhase::Entered, "");
            match node.kind {
                NodeKind::EndEvent => {}
                NodeKind::ParallelGateway => {
                    let out = tm.out_flows(n).to_vec();
                    tm.emit(&out);
                }
                NodeKind::ExclusiveGateway => match choose_flow(p, &tm, n, vars) {
                    Ok(f) => tm.emit(&[f]),
                    Err(e) => {
                        failure = Some(e);
                        break 'run;
                    }
                },
                NodeKind::ServiceTask => {
                    let cap = node.capability_id().map(str::to_string);
                    let params = node
                        .binding
                        .iter()
                        .flat_map(|b| &b.param_exprs)
                        .map(|(k, e)| {
                            e.eval(vars)
                                .map(|v| (k.clone(), v))
                                .map_err(|err| format!("parameter {k}: {err}"))
                        })
                        .collect::<Result<BTreeMap<_, _>, _>>();
                    let (cap, params) = match (cap, params) {
                        (Some(c), Ok(ps)) => (c, ps),
                        (None, _) => {
                            run.entry(n, EntryPhase::Failed, "task has no capability binding");
                            tm.drop_task(n);
                            if policy.fail_fast {
                                failure = Some(format!("task {} has no capability binding", node.label()));
                                break 'run;
                            }
                            failure.get_or_insert_with(|| format!("task {} failed", node.label()));
                            continue;
                        }
                        (_, Err(e)) => {
                            run.entry(n, EntryPhase::Failed, e.clone());
                            tm.drop_task(n);
                            if policy.fail_fast {
                                failure = Some(format!("task {}: {e}", node.label()));
                                break 'run;
                            }
                            failure.get_or_insert_with(|| format!("task {} failed", node.label()));
                            continue;
                        }
                    };
                    seq += 1;
                    let cmd = CommandEnvelope {
                        command_id: format!("{run_id}.{seq}"),
                        capability_id: cap.clone(),
                        params,
                        issued_at: dispatcher.now(),
                        timeout_s: policy.timeout_for(&cap),
                    };
                    run.entry(n, EntryPhase::Dispatched, cap.clone());
                    in_flight.push(Box::pin(run_task(dispatcher, n, cmd, policy.busy_wait_s)));
                }
                NodeKind::StartEvent => unreachable!("start events have no incoming flows"),
            }
            debug_assert!(tm.conserved());
        }
        let Some(res) = in_flight.next().await else { break };
        if res.ok {
            run.entry(res.node, EntryPhase::Completed, res.detail);
            tm.complete_task(res.node);
        } else {
            run.entry(res.node, EntryPhase::Failed, res.detail.clone());
            tm.drop_task(res.node);
            let msg = format!("task {} failed: {}", p.nodes[res.node].label(), res.detail);
            if policy.fail_fast {
                failure = Some(msg);
                break;
            }
            failure.get_or_insert(msg);
        }
        if !tm.conserved() {
            failure = Some("token conservation violated".into());
            break;
        }
    }
    drop(in_flight);

    run.log.tokens = tm.stats();
    let (outcome, detail) = match failure {
        Some(f) => (RunOutcome::Failed, f),
        None if tm.live() > 0 => (
            RunOutcome::Failed,
            format!("deadlock: {} token(s) cannot advance", tm.live()),
        ),
        None => (RunOutcome::Completed, String::new()),
    };
    run.log.finish(outcome, detail).expect("outcome is set once");
    run.log
}

/// Conditions in document order, the first true one wins, then the default
/// flow, else `no_path`.
fn choose_flow(p: &BpmnProcess, tm: &TokenMachine, n: usize, vars: &Vars) -> Result<usize, String> {
    let node = &p.nodes[n];
    let mut default = None;
    for &fi in tm.out_flows(n) {
        let f = &p.flows[fi];
        if node.default_flow_id.as_deref() == Some(f.flow_id.as_str()) {
            default = Some(fi);
            continue;
        }
        match &f.condition {
            None => return Ok(fi),
            Some(c) => match evaluate_condition(c, vars) {
                Ok(true) => return Ok(fi),
                Ok(false) => {}
                Err(e) => return Err(format!("condition of flow {}: {e}", f.flow_id)),
            },
        }
    }
    default.ok_or_else(|| {
        format!(
            "no_path: no condition of gateway {} holds and it has no default flow",
            node.label()
        )
    })
}

async fn run_task(d: &dyn Dispatcher, node: usize, mut cmd: CommandEnvelope, busy_wait_s: f64) -> TaskResult {
    let base_id = cmd.command_id.clone();
    let mut retried = false;
    loop {
        match d.dispatch(cmd.clone()).await {
            Dispatch::Finished {
                kind: RunEventKind::Completed,
                detail,
            } => {
                let detail = if retried {
                    format!("after busy retry {detail}").trim().to_string()
                } else {
                    detail
                };
                return TaskResult { node, ok: true, detail };
            }
            Dispatch::Finished { kind, detail } => {
                return TaskResult {
                    node,
                    ok: false,
                    detail: format!("{kind}: {detail}").trim_end_matches([':', ' ']).to_string(),
                }
            }
            Dispatch::Rejected { reason, .. } if reason == "busy" && !retried => {
                retried = true;
                if !d.wait_idle(&cmd.capability_id, busy_wait_s).await {
                    return TaskResult {
                        node,
                        ok: false,
                        detail: format!("rejected: busy for more than {busy_wait_s} s"),
                    };
                }
                cmd.command_id = format!("{base_id}.retry");
                cmd.issued_at = d.now();
            }
            Dispatch::Rejected { reason, detail } => {
                return TaskResult {
                    node,
                    ok: false,
                    detail: format!("rejected: {reason} {detail}").trim().to_string(),
                }
            }
        }
    }
}

/// Completes every command at once, advancing a logical clock by one
/// millisecond per dispatch. Capabilities listed in `failing` finish with
/// `failed`; those in `busy_once` are rejected as busy on first submission.
#[derive(Debug, Default)]
pub struct InstantDispatcher {
    clock: std::sync::atomic::AtomicU64,
    pub failing: std::collections::BTreeSet<String>,
    pub busy_once: std::sync::Mutex<std::collections::BTreeSet<String>>,
}

impl InstantDispatcher {
    pub fn failing<I: IntoIterator<Item = S>, S: Into<String>>(caps: I) -> Self {
        InstantDispatcher {
            failing: caps.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }
}

#[async_trait]
impl Dispatcher for InstantDispatcher {
    fn now(&self) -> Millis {
        self.clock.load(std::sync::atomic::Ordering::Relaxed)
    }

    async fn dispatch(&self, cmd: CommandEnvelope) -> Dispatch {
        self.clock.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        if self.busy_once.lock().expect("busy set").remove(&cmd.capability_id) {
            return Dispatch::rejected("busy");
        }
        if self.failing.contains(&cmd.capability_id) {
            return Dispatch::Finished {
                kind: RunEventKind::Failed,
                detail: "injected failure".into(),
            };
        }
        Dispatch::completed()
    }

    async fn wait_idle(&self, _capability_id: &str, _max_wait_s: f64) -> bool {
        true
    }
}
