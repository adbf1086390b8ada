//! AutomationML (CAEX) object model, reader, path resolution and structural checks.

mod model;
mod parse;
mod resolve;
mod validate;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use model::*;
pub(crate) use parse::xml_depth_violation;
pub use parse::{parse_caex, MAX_ATTRIBUTES, MAX_DEPTH, MAX_XML_DEPTH};
pub use resolve::{find_element_by_id, is_valid_path, resolve_interface_ref, resolve_path, InterfaceTarget, Resolved};
pub use validate::{validate_structure, Finding, Severity, ValidationReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StructureIssue {
    pub element_path: String,
    pub message: String,
}

impl fmt::Display for StructureIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element_path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AmlError {
    #[error("XML syntax error at line {line}, column {column}: {message}")]
    Syntax { line: u32, column: u32, message: String },
    #[error("CAEX structure error: {}", join_issues(.issues))]
    Structure { issues: Vec<StructureIssue> },
}

fn join_issues(issues: &[StructureIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
