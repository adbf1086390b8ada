use std::fmt::Write as _;

use super::model::{BpmnProcess, NodeKind};
use super::parse::{BPMN_NS, TWINLOOP_NS};
use crate::value::ValueKind;

pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Serializes a process as BPMN 2.0 XML. Task bindings are written as the
/// `implementation` attribute, parameters and variables as extension elements.
pub fn write_bpmn(p: &BpmnProcess) -> String {
    let mut x = String::new();
    let pid = escape(&p.process_id);
    x.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        x,
        "<bpmn:definitions xmlns:bpmn=\"{BPMN_NS}\" xmlns:tl=\"{TWINLOOP_NS}\" id=\"definitions_{pid}\" targetNamespace=\"urn:twinloop:processes\">"
    );
    let _ = writeln!(
        x,
        "  <bpmn:process id=\"{pid}\" name=\"{}\" isExecutable=\"true\">",
        escape(&p.name)
    );
    if !p.variables.is_empty() {
        x.push_str("    <bpmn:extensionElements>\n");
        for (name, kind) in &p.variables {
            let kind = match kind {
                ValueKind::Boolean => "boolean",
                ValueKind::Integer => "integer",
                ValueKind::Text => "text",
            };
            let _ = writeln!(x, "      <tl:variable name=\"{}\" kind=\"{kind}\"/>", escape(name));
        }
        x.push_str("    </bpmn:extensionElements>\n");
    }
    if !p.lanes.is_empty() {
        let _ = writeln!(x, "    <bpmn:laneSet id=\"{pid}_lanes\">");
        for l in &p.lanes {
            let _ = writeln!(
                x,
                "      <bpmn:lane id=\"{}\" name=\"{}\">",
                escape(&l.lane_id),
                escape(&l.name)
            );
            for n in &l.node_ids {
                let _ = writeln!(x, "        <bpmn:flowNodeRef>{}</bpmn:flowNodeRef>", escape(n));
            }
            x.push_str("      </bpmn:lane>\n");
        }
        x.push_str("    </bpmn:laneSet>\n");
    }
    for n in &p.nodes {
        let tag = n.kind.xml_name();
        let _ = write!(
            x,
            "    <bpmn:{tag} id=\"{}\" name=\"{}\"",
            escape(&n.node_id),
            escape(&n.name)
        );
        if let Some(d) = &n.default_flow_id {
            let _ = write!(x, " default=\"{}\"", escape(d));
        }
        let binding = n.binding.as_ref().filter(|_| n.kind == NodeKind::ServiceTask);
        if let Some(imp) = binding.and_then(|b| b.capability_id.as_ref().or(b.implementation.as_ref())) {
            let _ = write!(x, " implementation=\"{}\"", escape(imp));
        }
        match binding.filter(|b| !b.param_exprs.is_empty()) {
            Some(b) => {
                x.push_str(">\n      <bpmn:extensionElements>\n");
                for (name, e) in &b.param_exprs {
                    let _ = writeln!(
                        x,
                        "        <tl:param name=\"{}\">{}</tl:param>",
                        escape(name),
                        escape(&e.to_string())
                    );
                }
                let _ = writeln!(x, "      </bpmn:extensionElements>\n    </bpmn:{tag}>");
            }
            None => x.push_str("/>\n"),
        }
    }
    for f in &p.flows {
        let _ = write!(
            x,
            "    <bpmn:sequenceFlow id=\"{}\" sourceRef=\"{}\" targetRef=\"{}\"",
            escape(&f.flow_id),
            escape(&f.source),
            escape(&f.target)
        );
        match &f.condition {
            Some(c) => {
                let _ = writeln!(
                    x,
                    ">\n      <bpmn:conditionExpression>{}</bpmn:conditionExpression>\n    </bpmn:sequenceFlow>",
                    escape(&c.to_string())
                );
            }
            None => x.push_str("/>\n"),
        }
    }
    x.push_str("  </bpmn:process>\n</bpmn:definitions>\n");
    x
}
