//! Process-generation loop: prompt assembly, model backends, BPMN
//! extraction and the review state machine.

mod backend;
mod extract;
mod prompt;
mod session;
pub mod template;

pub use backend::{
    BackendError, BackendKind, LlmBackend, ReplayFixture, RequestKey, TemplateOffline, Unconfigured, ANY_SCENARIO,
};
pub use extract::{extract_bpmn_xml, ExtractError};
pub use prompt::{assemble_prompt, capabilities_context, Corrective, PromptBundle, BPMN_CREATION_PROMPT};
pub use session::{
    advance_loop, ActionKind, HistoryEntry, LoopAction, LoopEnv, LoopError, LoopPhase, ScenarioLoopState, Simulator,
    Transition, MAX_AUTO_ITERATIONS,
};
