//! BPMN 2.0 subset: parsing, validation against a plant config, and token execution.

pub mod exec;
pub mod expr;
pub mod generate;
pub mod model;
pub mod parse;
pub mod runlog;
pub mod sweep;
pub mod token;
pub mod validate;
pub mod write;

pub use exec::{execute, Dispatch, Dispatcher, ExecPolicy, InstantDispatcher};
pub use expr::{evaluate_condition, CmpOp, EvalError, Expr, Vars};
pub use model::{BpmnNode, BpmnProcess, CapabilityBinding, Lane, NodeKind, SequenceFlow};
pub use parse::{parse_bpmn, BpmnIssue, BpmnParseError, ParseMode, ParsedBpmn};
pub use runlog::{EntryPhase, LogEntry, RunLog, RunOutcome};
pub use token::{TokenMachine, TokenStats};
pub use validate::{bind_process, resolve_binding, validate_process, ValidationReport};
pub use write::write_bpmn;
