//! The generate / validate / simulate / review loop for one scenario.

use std::fmt;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::backend::{BackendError, LlmBackend, RequestKey};
use super::extract::extract_bpmn_xml;
use super::prompt::{assemble_prompt, Corrective, PromptBundle};
use crate::bpmn::{bind_process, parse_bpmn, BpmnProcess, ParseMode, RunLog, RunOutcome, ValidationReport};
use crate::plant::PlantConfig;

/// Automatic corrective iterations allowed between two supervisor inputs.
pub const MAX_AUTO_ITERATIONS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopPhase {
    Drafting,
    Generated,
    Validated,
    Simulating,
    AwaitingReview,
    Accepted,
    Rejected,
}

impl LoopPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopPhase::Drafting => "drafting",
            LoopPhase::Generated => "generated",
            LoopPhase::Validated => "validated",
            LoopPhase::Simulating => "simulating",
            LoopPhase::AwaitingReview => "awaiting_review",
            LoopPhase::Accepted => "accepted",
            LoopPhase::Rejected => "rejected",
        }
    }

    pub fn is_final(self) -> bool {
        matches!(self, LoopPhase::Accepted | LoopPhase::Rejected)
    }
}

impl fmt::Display for LoopPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "text", rename_all = "snake_case")]
pub enum LoopAction {
    Generate,
    Simulate,
    Corrective(String),
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Generate,
    Simulate,
    Corrective,
    Accept,
    Reject,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Generate,
        ActionKind::Simulate,
        ActionKind::Corrective,
        ActionKind::Accept,
        ActionKind::Reject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Generate => "generate",
            ActionKind::Simulate => "simulate",
            ActionKind::Corrective => "corrective",
            ActionKind::Accept => "accept",
            ActionKind::Reject => "reject",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl LoopAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            LoopAction::Generate => ActionKind::Generate,
            LoopAction::Simulate => ActionKind::Simulate,
            LoopAction::Corrective(_) => ActionKind::Corrective,
            LoopAction::Accept => ActionKind::Accept,
            LoopAction::Reject => ActionKind::Reject,
        }
    }
}

/// One generation attempt and everything that followed from it. Fields are
/// filled once and never rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    /// Triggered by a validation failure rather than by an action.
    #[serde(default)]
    pub automatic: bool,
    pub prompt_bundle: PromptBundle,
    /// Verbatim backend reply; absent when the backend failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    /// Backend, extraction or parse failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpmn_xml: Option<String>,
    /// The parsed process with task bindings resolved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpmn: Option<BpmnProcess>,
    #[serde(default)]
    pub validation: ValidationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_log: Option<RunLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervisor_note: Option<String>,
}

impl HistoryEntry {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.bpmn.is_some() && self.validation.is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLoopState {
    pub scenario_id: String,
    pub goal: String,
    pub phase: LoopPhase,
    pub history: Vec<HistoryEntry>,
    /// Automatic iterations since the last supervisor input.
    #[serde(default)]
    pub auto_iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoopError {
    #[error("{action} is not allowed in phase {phase}: {explanation}")]
    Illegal {
        action: ActionKind,
        phase: LoopPhase,
        explanation: String,
    },
    #[error("cannot accept: latest simulation {0}")]
    NoCompletedRun(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Runs a validated process on the virtual plant.
#[async_trait]
pub trait Simulator: Send + Sync {
    async fn simulate(&self, scenario_id: &str, process: &BpmnProcess) -> RunLog;
}

pub struct LoopEnv<'a> {
    pub config: &'a PlantConfig,
    pub backend: &'a dyn LlmBackend,
    pub simulator: &'a dyn Simulator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: LoopPhase,
    pub to: LoopPhase,
    /// History entries appended by this action.
    pub appended: usize,
}

impl ScenarioLoopState {
    pub fn new(scenario_id: impl Into<String>, goal: impl Into<String>) -> Self {
        ScenarioLoopState {
            scenario_id: scenario_id.into(),
            goal: goal.into(),
            phase: LoopPhase::Drafting,
            history: Vec::new(),
            auto_iterations: 0,
        }
    }

    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.history.last()
    }

    /// The accepted process, once the scenario is accepted.
    pub fn accepted_process(&self) -> Option<&HistoryEntry> {
        (self.phase == LoopPhase::Accepted).then(|| self.latest()).flatten()
    }

    /// Checks whether `kind` may be applied now, with the reason if not.
    pub fn check(&self, kind: ActionKind) -> Result<(), LoopError> {
        use ActionKind as A;
        use LoopPhase as P;
        let deny = |explanation: &str| {
            Err(LoopError::Illegal {
                action: kind,
                phase: self.phase,
                explanation: explanation.to_string(),
            })
        };
        if self.phase.is_final() {
            return deny("the scenario is closed");
        }
        match (self.phase, kind) {
            (_, A::Reject) => Ok(()),
            (P::Drafting, A::Generate) => Ok(()),
            (P::Drafting, A::Corrective) => match self.latest() {
                None => deny("nothing has been generated yet"),
                Some(e) if e.supervisor_note.is_some() => deny("a note is already pending for the next generation"),
                Some(_) => Ok(()),
            },
            (P::Validated, A::Simulate) => Ok(()),
            (P::AwaitingReview, A::Corrective) => Ok(()),
            (P::AwaitingReview, A::Accept) => Ok(()),
            (P::Drafting, _) => deny("generate a process first"),
            (P::Validated, _) => deny("simulate the validated process first"),
            (P::AwaitingReview, _) => deny("review the run: accept, reject or send a corrective note"),
            (P::Generated | P::Simulating, _) => deny("another action is in progress"),
            (P::Accepted | P::Rejected, _) => unreachable!(),
        }
    }

    pub fn allowed_actions(&self) -> Vec<ActionKind> {
        ActionKind::ALL.into_iter().filter(|&k| self.check(k).is_ok()).collect()
    }

    fn corrective_context(&self) -> Option<Corrective> {
        let e = self.latest()?;
        let mut errors = Vec::new();
        errors.extend(e.error.iter().cloned());
        errors.extend(e.validation.errors.iter().cloned());
        let note = e.supervisor_note.clone().or_else(|| {
            (!errors.is_empty()).then(|| "The previous answer was rejected by automatic validation.".to_string())
        });
        Some(Corrective {
            note,
            previous_bpmn: e.bpmn_xml.clone().or_else(|| e.raw_response.clone()),
            validation_errors: errors,
        })
    }

    async fn attempt(&mut self, env: &LoopEnv<'_>, automatic: bool) -> Result<bool, BackendError> {
        let iteration = self.history.len() as u32 + 1;
        let corrective = self.corrective_context();
        let bundle = assemble_prompt(env.config, &self.goal, corrective.as_ref(), iteration);
        let key = RequestKey {
            scenario_id: &self.scenario_id,
            iteration,
        };
        let reply = env.backend.complete(&bundle, key).await;
        let mut entry = HistoryEntry {
            iteration,
            automatic,
            prompt_bundle: bundle,
            raw_response: None,
            error: None,
            bpmn_xml: None,
            bpmn: None,
            validation: ValidationReport::default(),
            run_log: None,
            supervisor_note: None,
        };
        let raw = match reply {
            Ok(r) => r,
            Err(e) => {
                entry.error = Some(e.to_string());
                self.history.push(entry);
                self.phase = LoopPhase::Drafting;
                return Err(e);
            }
        };
        entry.raw_response = Some(raw.clone());
        self.phase = LoopPhase::Generated;
        match extract_bpmn_xml(&raw) {
            Err(e) => entry.error = Some(format!("extraction failed: {e}")),
            Ok(xml) => {
                match parse_bpmn(&xml, ParseMode::Lenient) {
                    Err(e) => entry.error = Some(format!("BPMN parse failed: {e}")),
                    Ok(parsed) => {
                        let (bound, mut report) = bind_process(&parsed.process, env.config);
                        report.warnings.extend(parsed.warnings.iter().map(ToString::to_string));
                        entry.bpmn = Some(bound);
                        entry.validation = report;
                    }
                }
                entry.bpmn_xml = Some(xml);
            }
        }
        let ok = entry.succeeded();
        self.history.push(entry);
        self.phase = if ok { LoopPhase::Validated } else { LoopPhase::Drafting };
        Ok(ok)
    }
}

/// Applies one action. Illegal actions leave the state untouched; backend
/// failures are recorded in the history and leave the scenario drafting.
pub async fn advance_loop(
    state: &mut ScenarioLoopState,
    action: LoopAction,
    env: &LoopEnv<'_>,
) -> Result<Transition, LoopError> {
    state.check(action.kind())?;
    let from = state.phase;
    let before = state.history.len();
    match action {
        LoopAction::Generate => {
            let mut ok = state.attempt(env, false).await?;
            while !ok && state.auto_iterations < MAX_AUTO_ITERATIONS {
                state.auto_iterations += 1;
                ok = state.attempt(env, true).await?;
            }
        }
        LoopAction::Simulate => {
            state.phase = LoopPhase::Simulating;
            let entry = state.history.last_mut().expect("validated implies an entry");
            let p = entry.bpmn.as_ref().expect("validated entry has a process");
            let log = env.simulator.simulate(&state.scenario_id, p).await;
            entry.run_log = Some(log);
            state.phase = LoopPhase::AwaitingReview;
        }
        LoopAction::Corrective(note) => {
            let entry = state.history.last_mut().expect("checked");
            entry.supervisor_note = Some(note);
            state.auto_iterations = 0;
            state.phase = LoopPhase::Drafting;
        }
        LoopAction::Accept => {
            let outcome = state
                .latest()
                .and_then(|e| e.run_log.as_ref())
                .map(|l| (l.outcome, l.detail.clone()));
            match outcome {
                Some((Some(RunOutcome::Completed), _)) => state.phase = LoopPhase::Accepted,
                Some((o, detail)) => {
                    let o = o.map_or("unfinished", RunOutcome::as_str);
                    return Err(LoopError::NoCompletedRun(
                        format!("ended {o} {detail}").trim_end().to_string(),
                    ));
                }
                None => return Err(LoopError::NoCompletedRun("is missing".into())),
            }
        }
        LoopAction::Reject => state.phase = LoopPhase::Rejected,
    }
    Ok(Transition {
        from,
        to: state.phase,
        appended: state.history.len() - before,
    })
}
