//! Offline compiler from a `steps: [...]` goal to a sequential BPMN process.

use std::collections::BTreeMap;

use crate::bpmn::{write_bpmn, BpmnNode, BpmnProcess, CapabilityBinding, Expr, Lane, NodeKind, SequenceFlow};
use crate::ids::slug;
use crate::plant::{CapabilityDescriptor, PlantConfig};
use crate::value::{Value, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("goal has no `steps: [...]` list")]
    NoStepList,
    #[error("step list is empty")]
    Empty,
    #[error("step {index}: malformed step `{text}`")]
    Malformed { index: usize, text: String },
    #[error("unknown step: {0}")]
    UnknownStep(String),
    #[error("ambiguous step: {0} names several capabilities, use the capability id")]
    Ambiguous(String),
    #[error("step {step}: unknown parameter {param}")]
    UnknownParam { step: String, param: String },
    #[error("step {step}: parameter {param}: {message}")]
    BadParam {
        step: String,
        param: String,
        message: String,
    },
}

/// One parsed step: capability name or id plus `key=value` arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub name: String,
    pub args: Vec<(String, String)>,
}

/// Splits on commas that are not inside parentheses or quotes.
fn split_top(s: &str) -> Vec<&str> {
    let (mut depth, mut quote, mut start) = (0i32, None, 0);
    let mut out = Vec::new();
    for (i, c) in s.char_indices() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '"' | '\'') => quote = Some(c),
            (None, '(') => depth += 1,
            (None, ')') => depth -= 1,
            (None, ',') if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

/// Parses `steps: [A, B(k=v), ...]` found anywhere in the goal text.
pub fn parse_steps(goal: &str) -> Result<Vec<Step>, TemplateError> {
    let at = goal.find("steps:").ok_or(TemplateError::NoStepList)?;
    let rest = goal[at + "steps:".len()..].trim_start();
    let body = rest.strip_prefix('[').ok_or(TemplateError::NoStepList)?;
    let end = body.rfind(']').ok_or(TemplateError::NoStepList)?;
    let body = &body[..end];
    if body.trim().is_empty() {
        return Err(TemplateError::Empty);
    }
    let mut steps = Vec::new();
    for (index, raw) in split_top(body).into_iter().enumerate() {
        let text = raw.trim();
        let bad = || TemplateError::Malformed {
            index: index + 1,
            text: text.to_string(),
        };
        let (name, args) = match text.find('(') {
            Some(open) => {
                let inner = text[open + 1..].strip_suffix(')').ok_or_else(bad)?;
                let mut args = Vec::new();
                for a in split_top(inner).into_iter().filter(|a| !a.trim().is_empty()) {
                    let (k, v) = a.split_once('=').ok_or_else(bad)?;
                    args.push((k.trim().to_string(), unquote(v).to_string()));
                }
                (text[..open].trim(), args)
            }
            None => (text, Vec::new()),
        };
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || "_.-".contains(c)) {
            return Err(bad());
        }
        steps.push(Step {
            name: name.to_string(),
            args,
        });
    }
    Ok(steps)
}

fn resolve<'c>(config: &'c PlantConfig, name: &str) -> Result<&'c CapabilityDescriptor, TemplateError> {
    if let Some(c) = config.capability(name) {
        return Ok(c);
    }
    let found: Vec<_> = config.capabilities_named(name).collect();
    match found.as_slice() {
        [] => Err(TemplateError::UnknownStep(name.to_string())),
        [one] => Ok(one),
        _ => Err(TemplateError::Ambiguous(name.to_string())),
    }
}

fn literal(cap: &CapabilityDescriptor, step: &str, key: &str, raw: &str) -> Result<Expr, TemplateError> {
    let spec = cap
        .params
        .iter()
        .find(|p| p.name == key)
        .ok_or_else(|| TemplateError::UnknownParam {
            step: step.to_string(),
            param: key.to_string(),
        })?;
    let bad = |message: String| TemplateError::BadParam {
        step: step.to_string(),
        param: key.to_string(),
        message,
    };
    let v = match spec.data_kind {
        ValueKind::Integer => Value::Int(raw.parse().map_err(|_| bad(format!("`{raw}` is not an integer")))?),
        ValueKind::Boolean => Value::Bool(raw.parse().map_err(|_| bad(format!("`{raw}` is not a boolean")))?),
        ValueKind::Text => Value::Text(raw.to_string()),
    };
    spec.check(&v).map_err(bad)?;
    Ok(Expr::Lit(v))
}

/// Builds the sequential process for the steps in `goal`, one lane per
/// machine in order of first use.
pub fn compile_steps(config: &PlantConfig, goal: &str) -> Result<BpmnProcess, TemplateError> {
    let steps = parse_steps(goal)?;
    let mut p = BpmnProcess {
        process_id: "generated_process".into(),
        name: "Generated process".into(),
        ..Default::default()
    };
    p.nodes.push(BpmnNode::new("start", NodeKind::StartEvent, "Start"));
    let mut lanes: Vec<Lane> = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        let cap = resolve(config, &step.name)?;
        let param_exprs = step
            .args
            .iter()
            .map(|(k, v)| Ok((k.clone(), literal(cap, &step.name, k, v)?)))
            .collect::<Result<BTreeMap<_, _>, TemplateError>>()?;
        let id = format!("task_{}", i + 1);
        let mut node = BpmnNode::new(id.clone(), NodeKind::ServiceTask, cap.name.clone());
        node.binding = Some(CapabilityBinding {
            capability_id: Some(cap.capability_id.clone()),
            implementation: None,
            param_exprs,
        });
        p.nodes.push(node);
        let machine = config
            .machine(&cap.machine_id)
            .map_or(cap.machine_id.as_str(), |m| m.name.as_str());
        match lanes.iter_mut().find(|l| l.name == machine) {
            Some(l) => l.node_ids.push(id),
            None => lanes.push(Lane {
                lane_id: format!("lane_{}", slug(machine)),
                name: machine.to_string(),
                node_ids: vec![id],
            }),
        }
    }
    p.nodes.push(BpmnNode::new("end", NodeKind::EndEvent, "End"));
    if let Some(first) = lanes.first_mut() {
        first.node_ids.insert(0, "start".into());
    }
    if let Some(last) = lanes
        .iter_mut()
        .find(|l| l.node_ids.contains(&format!("task_{}", steps.len())))
    {
        last.node_ids.push("end".into());
    }
    p.lanes = lanes;
    for w in 0..p.nodes.len() - 1 {
        p.flows.push(SequenceFlow {
            flow_id: format!("flow_{}", w + 1),
            source: p.nodes[w].node_id.clone(),
            target: p.nodes[w + 1].node_id.clone(),
            condition: None,
        });
    }
    Ok(p)
}

/// [`compile_steps`] rendered as BPMN XML.
pub fn compile_steps_xml(config: &PlantConfig, goal: &str) -> Result<String, TemplateError> {
    compile_steps(config, goal).map(|p| write_bpmn(&p))
}
