use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::plant::{ParamSpec, PlantConfig};

/// Static system instruction sent with every generation request.
pub const BPMN_CREATION_PROMPT: &str = r#"You are a process engineer. Produce one BPMN 2.0 process that achieves the goal below using only the listed capabilities.

Output rules:
- Reply with the BPMN 2.0 XML document only: no explanations, no markdown.
- The root element is <definitions xmlns="http://www.omg.org/spec/BPMN/20100524/MODEL" xmlns:tl="urn:twinloop:bpmn:1">.
- Use exactly one startEvent, at least one endEvent, and connect every node with sequenceFlow elements.
- Every step is a serviceTask whose implementation attribute is the capability id in square brackets below and whose name is the capability name.
- Put each task in a lane named after the machine that performs it.
- Set task parameters with <extensionElements><tl:param name="NAME" value="VALUE"/></extensionElements>; quote text values, for example value="'punch'".
- Allowed elements: startEvent, endEvent, serviceTask, exclusiveGateway, parallelGateway, sequenceFlow, laneSet, lane.
"#;

/// Input to one generation request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub capabilities_context: String,
    pub bpmn_creation_prompt: String,
    pub goal_description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrective_prompt: Option<String>,
    pub iteration: u32,
}

/// What the previous iteration left behind for the next prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corrective {
    /// Supervisor note, or a machine-written note for automatic iterations.
    pub note: Option<String>,
    pub previous_bpmn: Option<String>,
    pub validation_errors: Vec<String>,
}

impl Corrective {
    pub fn is_empty(&self) -> bool {
        self.note.is_none() && self.previous_bpmn.is_none() && self.validation_errors.is_empty()
    }

    fn render(&self) -> String {
        let mut s = String::new();
        if let Some(n) = &self.note {
            let _ = writeln!(s, "Supervisor note:\n{n}\n");
        }
        if let Some(x) = &self.previous_bpmn {
            let _ = writeln!(s, "Previous BPMN:\n{}\n", x.trim_end());
        }
        if !self.validation_errors.is_empty() {
            s.push_str("Validation errors:\n");
            for e in &self.validation_errors {
                let _ = writeln!(s, "- {e}");
            }
            s.push('\n');
        }
        s.push_str("Return a corrected BPMN document that addresses the points above.\n");
        s
    }
}

fn param_signature(p: &ParamSpec) -> String {
    let mut s = format!("{}: {}", p.name, p.data_kind);
    if let Some(r) = &p.range {
        let _ = write!(s, " {}..{}", r.min, r.max);
    }
    if let Some(c) = &p.choices {
        let _ = write!(s, " one of {}", c.join("|"));
    }
    if let Some(d) = &p.default {
        let _ = write!(s, " = {d}");
    }
    s
}

/// Machines in config order, each with its capabilities and parameter
/// signatures.
pub fn capabilities_context(config: &PlantConfig) -> String {
    let mut s = format!("Plant {} ({})\n", config.plant_name, config.plant_id);
    for m in &config.machines {
        let kind = serde_json::to_value(m.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let _ = writeln!(s, "Machine {} [{}], kind {kind}", m.name, m.machine_id);
        let caps: Vec<_> = config.capabilities_of_machine(&m.machine_id).collect();
        if caps.is_empty() {
            s.push_str("  (no capabilities)\n");
        }
        for c in caps {
            let params: Vec<String> = c.params.iter().map(param_signature).collect();
            let _ = write!(s, "  - {} [{}]({})", c.name, c.capability_id, params.join(", "));
            if c.nominal_duration_s > 0.0 {
                let _ = write!(s, ", about {} s", c.nominal_duration_s);
            }
            if !c.description.is_empty() {
                let _ = write!(s, ": {}", c.description);
            }
            s.push('\n');
        }
    }
    s
}

/// Builds the prompt for one iteration. The corrective section appears only
/// when `corrective` carries something.
pub fn assemble_prompt(
    config: &PlantConfig,
    goal: &str,
    corrective: Option<&Corrective>,
    iteration: u32,
) -> PromptBundle {
    PromptBundle {
        capabilities_context: capabilities_context(config),
        bpmn_creation_prompt: BPMN_CREATION_PROMPT.to_string(),
        goal_description: goal.trim().to_string(),
        corrective_prompt: corrective.filter(|c| !c.is_empty()).map(Corrective::render),
        iteration: iteration.max(1),
    }
}

impl PromptBundle {
    /// The user message sent to a chat model.
    pub fn user_message(&self) -> String {
        let mut s = format!(
            "## Plant capabilities\n{}\n## Goal\n{}\n",
            self.capabilities_context, self.goal_description
        );
        if let Some(c) = &self.corrective_prompt {
            let _ = write!(s, "\n## Corrections for iteration {}\n{c}", self.iteration);
        }
        s
    }

    /// System instruction followed by the user message.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.bpmn_creation_prompt, self.user_message())
    }
}
