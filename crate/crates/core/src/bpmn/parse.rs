use std::collections::{BTreeMap, HashSet};
use std::fmt;

use roxmltree::{Document, Node};
use serde::Serialize;

use super::expr::Expr;
use super::model::{BpmnNode, BpmnProcess, Lane, NodeKind, SequenceFlow};
use crate::aml::{xml_depth_violation, MAX_XML_DEPTH};
use crate::value::ValueKind;

pub const BPMN_NS: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";
pub const BPMNDI_NS: &str = "http://www.omg.org/spec/BPMN/20100524/DI";
/// Namespace of the task parameter and variable declaration extensions.
pub const TWINLOOP_NS: &str = "urn:twinloop:bpmn:1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Unsupported elements are errors.
    #[default]
    Strict,
    /// Unsupported elements are warnings; other activity types count as tasks.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BpmnIssue {
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<u32>,
}

impl fmt::Display for BpmnIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{} (line {l}, column {c})", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}", .issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct BpmnParseError {
    pub issues: Vec<BpmnIssue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedBpmn {
    pub process: BpmnProcess,
    pub warnings: Vec<BpmnIssue>,
}

const ARTIFACTS: &[&str] = &[
    "documentation",
    "textAnnotation",
    "association",
    "group",
    "dataObject",
    "dataObjectReference",
    "dataStoreReference",
    "property",
];

const OTHER_ACTIVITIES: &[&str] = &[
    "userTask",
    "manualTask",
    "scriptTask",
    "sendTask",
    "receiveTask",
    "businessRuleTask",
];

struct Ctx<'a> {
    doc: &'a Document<'a>,
    mode: ParseMode,
    errors: Vec<BpmnIssue>,
    warnings: Vec<BpmnIssue>,
}

impl<'a> Ctx<'a> {
    fn issue(&self, node: Node, message: String) -> BpmnIssue {
        let pos = self.doc.text_pos_at(node.range().start);
        BpmnIssue {
            message,
            line: Some(pos.row),
            column: Some(pos.col),
        }
    }

    fn error(&mut self, node: Node, message: String) {
        let i = self.issue(node, message);
        self.errors.push(i);
    }

    fn warn(&mut self, node: Node, message: String) {
        let i = self.issue(node, message);
        self.warnings.push(i);
    }

    fn unsupported(&mut self, node: Node) {
        let msg = format!("unsupported element {}", node.tag_name().name());
        match self.mode {
            ParseMode::Strict => self.error(node, msg),
            ParseMode::Lenient => self.warn(node, format!("{msg} ignored")),
        }
    }

    /// Local name of a BPMN-namespace element. Unqualified elements count
    /// in lenient mode only.
    fn bpmn_name(&self, node: Node<'a, 'a>) -> Option<&'a str> {
        match node.tag_name().namespace() {
            Some(BPMN_NS) => Some(node.tag_name().name()),
            None if self.mode == ParseMode::Lenient => Some(node.tag_name().name()),
            _ => None,
        }
    }
}

fn elements<'a, 'i>(n: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    n.children().filter(Node::is_element)
}

/// Parses a BPMN 2.0 document restricted to the supported subset.
pub fn parse_bpmn(xml: &str, mode: ParseMode) -> Result<ParsedBpmn, BpmnParseError> {
    let fail = |message: String, line, column| BpmnParseError {
        issues: vec![BpmnIssue {
            message,
            line: Some(line),
            column: Some(column),
        }],
    };
    if let Some((line, column)) = xml_depth_violation(xml, MAX_XML_DEPTH) {
        return Err(fail(
            format!("element nesting deeper than {MAX_XML_DEPTH}"),
            line,
            column,
        ));
    }
    let opts = roxmltree::ParsingOptions {
        allow_dtd: false,
        ..Default::default()
    };
    let doc = Document::parse_with_options(xml, opts).map_err(|e| {
        let p = e.pos();
        fail(format!("XML syntax error: {e}"), p.row, p.col)
    })?;
    let mut cx = Ctx {
        doc: &doc,
        mode,
        errors: Vec::new(),
        warnings: Vec::new(),
    };
    let root = doc.root_element();
    if cx.bpmn_name(root) != Some("definitions") {
        return Err(BpmnParseError {
            issues: vec![cx.issue(
                root,
                format!("root element is {}, expected BPMN definitions", root.tag_name().name()),
            )],
        });
    }

    let mut processes = Vec::new();
    for child in elements(root) {
        if child.tag_name().namespace() == Some(BPMNDI_NS) {
            continue;
        }
        match cx.bpmn_name(child) {
            Some("process") => processes.push(child),
            Some("collaboration") => {
                for c in elements(child) {
                    match cx.bpmn_name(c) {
                        Some("participant") | Some("documentation") | Some("extensionElements") => {}
                        _ => cx.unsupported(c),
                    }
                }
            }
            Some("documentation") | Some("extensionElements") => {}
            Some(_) => cx.unsupported(child),
            None => cx.warn(child, format!("foreign element {} ignored", child.tag_name().name())),
        }
    }
    let has_nodes =
        |p: &Node| elements(*p).any(|c| cx.bpmn_name(c).is_some_and(|n| n != "laneSet" && n != "documentation"));
    let candidates: Vec<Node> = processes.iter().copied().filter(has_nodes).collect();
    let proc_node = match candidates.as_slice() {
        [] => {
            cx.error(root, "no process element with flow nodes".into());
            return Err(BpmnParseError { issues: cx.errors });
        }
        [one] => *one,
        many => {
            let ids: Vec<&str> = many.iter().map(|p| p.attribute("id").unwrap_or("?")).collect();
            let msg = format!("multiple executable processes: {}", ids.join(", "));
            if mode == ParseMode::Strict {
                cx.error(many[1], msg);
                return Err(BpmnParseError { issues: cx.errors });
            }
            cx.warn(many[1], format!("{msg}; using {}", ids[0]));
            many[0]
        }
    };

    let process = parse_process(&mut cx, proc_node);
    if cx.errors.is_empty() {
        Ok(ParsedBpmn {
            process,
            warnings: cx.warnings,
        })
    } else {
        Err(BpmnParseError { issues: cx.errors })
    }
}

fn parse_process<'a>(cx: &mut Ctx<'a>, pn: Node<'a, 'a>) -> BpmnProcess {
    let mut p = BpmnProcess {
        process_id: pn.attribute("id").unwrap_or("process").to_string(),
        name: pn.attribute("name").unwrap_or_default().to_string(),
        ..Default::default()
    };
    let mut flow_nodes: Vec<(Node, String)> = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();
    let mut lane_refs: Vec<(Node, String)> = Vec::new();

    for child in elements(pn) {
        let Some(name) = cx.bpmn_name(child) else {
            cx.warn(child, format!("foreign element {} ignored", child.tag_name().name()));
            continue;
        };
        let id = child.attribute("id").map(str::to_string);
        if let Some(id) = &id {
            if !ids.insert(id.clone()) {
                cx.error(child, format!("duplicate id {id}"));
                continue;
            }
        }
        let kind = match name {
            "startEvent" => Some(NodeKind::StartEvent),
            "endEvent" => Some(NodeKind::EndEvent),
            "serviceTask" | "task" => Some(NodeKind::ServiceTask),
            "exclusiveGateway" => Some(NodeKind::ExclusiveGateway),
            "parallelGateway" => Some(NodeKind::ParallelGateway),
            n if OTHER_ACTIVITIES.contains(&n) && cx.mode == ParseMode::Lenient => {
                cx.warn(child, format!("{n} treated as serviceTask"));
                Some(NodeKind::ServiceTask)
            }
            _ => None,
        };
        if let Some(kind) = kind {
            let Some(id) = id else {
                cx.error(child, format!("{name} without id"));
                continue;
            };
            let node = parse_node(cx, child, kind, id.clone());
            p.nodes.push(node);
            flow_nodes.push((child, id));
            continue;
        }
        match name {
            "sequenceFlow" => {
                let (Some(id), Some(src), Some(tgt)) = (id, child.attribute("sourceRef"), child.attribute("targetRef"))
                else {
                    cx.error(child, "sequenceFlow needs id, sourceRef and targetRef".into());
                    continue;
                };
                let mut condition = None;
                for c in elements(child) {
                    match cx.bpmn_name(c) {
                        Some("conditionExpression") => {
                            let text = c.text().unwrap_or_default();
                            match Expr::parse(text) {
                                Ok(e) => condition = Some(e),
                                Err(e) => cx.error(c, format!("condition of flow {id}: {e}")),
                            }
                        }
                        Some("documentation") | Some("extensionElements") => {}
                        _ => cx.unsupported(c),
                    }
                }
                p.flows.push(SequenceFlow {
                    flow_id: id,
                    source: src.to_string(),
                    target: tgt.to_string(),
                    condition,
                });
            }
            "laneSet" => parse_lanes(cx, child, &mut p.lanes, &mut lane_refs),
            "extensionElements" => parse_variables(cx, child, &mut p.variables),
            n if ARTIFACTS.contains(&n) => {}
            _ => cx.unsupported(child),
        }
    }

    let node_ids: HashSet<&str> = p.nodes.iter().map(|n| n.node_id.as_str()).collect();
    let starts = p.count(NodeKind::StartEvent);
    if starts == 0 {
        cx.error(pn, "missing start event".into());
    } else if starts > 1 {
        let n = flow_nodes
            .iter()
            .map(|(n, _)| *n)
            .filter(|n| cx.bpmn_name(*n) == Some("startEvent"))
            .nth(1)
            .expect("second start");
        cx.error(n, format!("{starts} start events, expected exactly one"));
    }
    if p.count(NodeKind::EndEvent) == 0 {
        cx.error(pn, "missing end event".into());
    }
    let flow_elems: Vec<Node> = elements(pn)
        .filter(|c| cx.bpmn_name(*c) == Some("sequenceFlow"))
        .collect();
    for f in &p.flows {
        let at = flow_elems
            .iter()
            .copied()
            .find(|e| e.attribute("id") == Some(f.flow_id.as_str()))
            .unwrap_or(pn);
        for (end, r) in [("sourceRef", &f.source), ("targetRef", &f.target)] {
            if !node_ids.contains(r.as_str()) {
                cx.error(at, format!("flow {} {end} {r} does not exist", f.flow_id));
            }
        }
    }
    for (node, id) in &flow_nodes {
        let Some(n) = p.node(id) else { continue };
        if let Some(d) = &n.default_flow_id {
            match p.flow(d) {
                Some(f) if f.source == *id => {}
                Some(_) => cx.error(*node, format!("default flow {d} does not leave gateway {id}")),
                None => cx.error(*node, format!("default flow {d} does not exist")),
            }
        }
    }
    for (node, r) in lane_refs {
        if !node_ids.contains(r.as_str()) {
            cx.warn(node, format!("lane references unknown node {r}"));
        }
    }
    p
}

fn parse_node<'a>(cx: &mut Ctx<'a>, el: Node<'a, 'a>, kind: NodeKind, id: String) -> BpmnNode {
    let mut node = BpmnNode::new(id, kind, el.attribute("name").unwrap_or_default().trim());
    if kind == NodeKind::ExclusiveGateway {
        node.default_flow_id = el.attribute("default").map(str::to_string);
    }
    if let Some(b) = node.binding.as_mut() {
        b.implementation = el
            .attribute("implementation")
            .filter(|s| !s.trim().is_empty() && *s != "##unspecified" && *s != "##WebService")
            .map(|s| s.trim().to_string());
    }
    for c in elements(el) {
        match cx.bpmn_name(c) {
            Some("incoming") | Some("outgoing") | Some("documentation") => {}
            Some("extensionElements") => {
                let mut params = BTreeMap::new();
                for ext in elements(c) {
                    if ext.tag_name().namespace() != Some(TWINLOOP_NS) {
                        continue;
                    }
                    if ext.tag_name().name() != "param" || kind != NodeKind::ServiceTask {
                        cx.error(ext, format!("unexpected extension {}", ext.tag_name().name()));
                        continue;
                    }
                    let Some(name) = ext.attribute("name") else {
                        cx.error(ext, "param without name".into());
                        continue;
                    };
                    let text = ext.attribute("value").or_else(|| ext.text()).unwrap_or_default();
                    match Expr::parse(text) {
                        Ok(e) => {
                            params.insert(name.to_string(), e);
                        }
                        Err(e) => cx.error(ext, format!("param {name} of {}: {e}", node.node_id)),
                    }
                }
                if let Some(b) = node.binding.as_mut() {
                    b.param_exprs.extend(params);
                }
            }
            _ => cx.unsupported(c),
        }
    }
    node
}

fn parse_lanes<'a>(cx: &mut Ctx<'a>, set: Node<'a, 'a>, lanes: &mut Vec<Lane>, refs: &mut Vec<(Node<'a, 'a>, String)>) {
    for lane in elements(set) {
        match cx.bpmn_name(lane) {
            Some("lane") => {}
            Some("documentation") | Some("extensionElements") => continue,
            _ => {
                cx.unsupported(lane);
                continue;
            }
        }
        let mut l = Lane {
            lane_id: lane.attribute("id").unwrap_or_default().to_string(),
            name: lane.attribute("name").unwrap_or_default().trim().to_string(),
            node_ids: Vec::new(),
        };
        for c in elements(lane) {
            match cx.bpmn_name(c) {
                Some("flowNodeRef") => {
                    let r = c.text().unwrap_or_default().trim().to_string();
                    refs.push((c, r.clone()));
                    l.node_ids.push(r);
                }
                Some("childLaneSet") => parse_lanes(cx, c, lanes, refs),
                Some("documentation") | Some("extensionElements") => {}
                _ => cx.unsupported(c),
            }
        }
        lanes.push(l);
    }
}

fn parse_variables<'a>(cx: &mut Ctx<'a>, ext: Node<'a, 'a>, vars: &mut BTreeMap<String, ValueKind>) {
    for v in elements(ext).filter(|e| e.tag_name().namespace() == Some(TWINLOOP_NS)) {
        if v.tag_name().name() != "variable" {
            cx.error(v, format!("unexpected extension {}", v.tag_name().name()));
            continue;
        }
        let kind = match v.attribute("kind") {
            Some("boolean") => ValueKind::Boolean,
            Some("integer") => ValueKind::Integer,
            Some("text") => ValueKind::Text,
            other => {
                cx.error(v, format!("variable kind {other:?} is not boolean, integer or text"));
                continue;
            }
        };
        match v.attribute("name") {
            Some(n) => {
                vars.insert(n.to_string(), kind);
            }
            None => cx.error(v, "variable without name".into()),
        }
    }
}
