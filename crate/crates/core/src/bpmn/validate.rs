use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::expr::Expr;
use super::model::{BpmnNode, BpmnProcess, NodeKind};
use crate::ids::slug;
use crate::plant::{CapabilityDescriptor, PlantConfig};
use crate::value::ValueKind;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Finds the capability a service task refers to: the `implementation`
/// attribute as a capability id, else a case-insensitive name match, with
/// the lane name choosing the machine when several capabilities share a name.
pub fn resolve_binding<'c>(
    p: &BpmnProcess,
    node: &BpmnNode,
    config: &'c PlantConfig,
) -> Result<&'c CapabilityDescriptor, String> {
    let unbound = || format!("unbound task: {}", node.label());
    let imp = node.binding.as_ref().and_then(|b| b.implementation.as_deref());
    if let Some(c) = imp.and_then(|i| config.capability(i)) {
        return Ok(c);
    }
    let wanted = imp.unwrap_or(&node.name);
    let candidates: Vec<&CapabilityDescriptor> = config.capabilities_named(wanted).collect();
    match candidates.as_slice() {
        [] => Err(unbound()),
        [one] => Ok(*one),
        many => {
            let lane = p.lane_of(&node.node_id).map(|l| l.name.as_str()).unwrap_or_default();
            let in_lane: Vec<&&CapabilityDescriptor> = many
                .iter()
                .filter(|c| {
                    config.machine(&c.machine_id).is_some_and(|m| {
                        !lane.is_empty() && (m.name.eq_ignore_ascii_case(lane) || m.machine_id == slug(lane))
                    })
                })
                .collect();
            match in_lane.as_slice() {
                [one] => Ok(**one),
                _ => Err(format!(
                    "ambiguous task: {} matches {}",
                    node.label(),
                    many.iter()
                        .map(|c| c.capability_id.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                )),
            }
        }
    }
}

/// Resolves every task binding and runs all checks. The returned process
/// carries `capability_id` on every task that could be bound.
pub fn bind_process(p: &BpmnProcess, config: &PlantConfig) -> (BpmnProcess, ValidationReport) {
    let mut bound = p.clone();
    let mut r = ValidationReport::default();
    structural_checks(p, &mut r);
    for (i, node) in p.nodes.iter().enumerate() {
        if node.kind != NodeKind::ServiceTask {
            continue;
        }
        match resolve_binding(p, node, config) {
            Ok(cap) => {
                check_params(p, node, cap, &mut r);
                bound.nodes[i]
                    .binding
                    .get_or_insert_with(Default::default)
                    .capability_id = Some(cap.capability_id.clone());
            }
            Err(e) => r.errors.push(e),
        }
    }
    (bound, r)
}

pub fn validate_process(p: &BpmnProcess, config: &PlantConfig) -> ValidationReport {
    bind_process(p, config).1
}

/// Checks that need no plant config: graph shape, reachability, gateways
/// and condition types.
pub fn structural_checks(p: &BpmnProcess, r: &mut ValidationReport) {
    let mut seen = HashSet::new();
    for n in &p.nodes {
        if !seen.insert(n.node_id.as_str()) {
            r.errors.push(format!("duplicate node id {}", n.node_id));
        }
    }
    let mut seen_flows = HashSet::new();
    for f in &p.flows {
        if !seen_flows.insert(f.flow_id.as_str()) || seen.contains(f.flow_id.as_str()) {
            r.errors.push(format!("duplicate flow id {}", f.flow_id));
        }
    }
    let starts: Vec<&BpmnNode> = p.nodes.iter().filter(|n| n.kind == NodeKind::StartEvent).collect();
    if starts.len() != 1 {
        r.errors
            .push(format!("{} start events, expected exactly one", starts.len()));
    }
    if p.count(NodeKind::EndEvent) == 0 {
        r.errors.push("missing end event".into());
    }
    let index: HashMap<&str, usize> = p
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.as_str(), i))
        .collect();
    let mut succ = vec![Vec::new(); p.nodes.len()];
    let mut pred = vec![Vec::new(); p.nodes.len()];
    for f in &p.flows {
        match (index.get(f.source.as_str()), index.get(f.target.as_str())) {
            (Some(&s), Some(&t)) => {
                succ[s].push(t);
                pred[t].push(s);
            }
            _ => r.errors.push(format!("flow {} references a missing node", f.flow_id)),
        }
        let from = p.node(&f.source);
        if f.condition.is_some() && from.is_some_and(|n| n.kind != NodeKind::ExclusiveGateway) {
            r.errors.push(format!(
                "flow {}: conditions are only allowed on flows leaving an exclusive gateway",
                f.flow_id
            ));
        }
        if let Some(c) = &f.condition {
            check_condition(p, &f.flow_id, c, r);
        }
    }
    for (i, n) in p.nodes.iter().enumerate() {
        match n.kind {
            NodeKind::StartEvent if !pred[i].is_empty() => {
                r.errors.push(format!("start event {} has incoming flows", n.label()))
            }
            NodeKind::StartEvent if succ[i].is_empty() => {
                r.errors.push(format!("start event {} has no outgoing flow", n.label()))
            }
            NodeKind::EndEvent if !succ[i].is_empty() => {
                r.errors.push(format!("end event {} has outgoing flows", n.label()))
            }
            NodeKind::ExclusiveGateway => {
                if succ[i].is_empty() {
                    r.errors
                        .push(format!("exclusive gateway {} has no outgoing flow", n.label()));
                }
                if let Some(d) = &n.default_flow_id {
                    match p.flow(d) {
                        Some(f) if f.source == n.node_id => {
                            if f.condition.is_some() {
                                r.warnings
                                    .push(format!("default flow {d} has a condition, which is ignored"));
                            }
                        }
                        _ => r.errors.push(format!(
                            "default flow {d} of {} is not one of its outgoing flows",
                            n.label()
                        )),
                    }
                }
            }
            _ => {}
        }
    }
    if let [start] = starts.as_slice() {
        let s = index[start.node_id.as_str()];
        let fwd = reach(s, &succ);
        for (i, n) in p.nodes.iter().enumerate() {
            if !fwd[i] {
                r.errors.push(format!("unreachable node: {}", n.label()));
            }
        }
        let ends: Vec<usize> = (0..p.nodes.len())
            .filter(|&i| p.nodes[i].kind == NodeKind::EndEvent)
            .collect();
        let mut back = vec![false; p.nodes.len()];
        for e in ends {
            for (i, b) in reach(e, &pred).into_iter().enumerate() {
                back[i] |= b;
            }
        }
        for (i, n) in p.nodes.iter().enumerate() {
            if fwd[i] && !back[i] {
                r.errors.push(format!("no path to an end event from: {}", n.label()));
            }
        }
        let dom = dominators(s, &succ, &pred, &fwd);
        for (j, n) in p.nodes.iter().enumerate() {
            if n.kind != NodeKind::ParallelGateway || pred[j].len() < 2 || !fwd[j] {
                continue;
            }
            let matched = dom[j]
                .iter()
                .any(|&f| f != j && p.nodes[f].kind == NodeKind::ParallelGateway && succ[f].len() == pred[j].len());
            if !matched {
                r.warnings.push(format!("unmatched parallel join: {}", n.label()));
            }
        }
    }
    for l in &p.lanes {
        for n in &l.node_ids {
            if !index.contains_key(n.as_str()) {
                r.warnings.push(format!("lane {} references unknown node {n}", l.name));
            }
        }
    }
}

fn check_condition(p: &BpmnProcess, flow_id: &str, c: &Expr, r: &mut ValidationReport) {
    match c.type_of(&p.variables) {
        Ok(ValueKind::Boolean) => {}
        Ok(k) => r
            .errors
            .push(format!("condition of flow {flow_id} is {k}, expected boolean")),
        Err(e) => r.errors.push(format!("condition of flow {flow_id}: {e}")),
    }
}

fn check_params(p: &BpmnProcess, node: &BpmnNode, cap: &CapabilityDescriptor, r: &mut ValidationReport) {
    let exprs = node.binding.as_ref().map(|b| &b.param_exprs);
    let empty = BTreeMap::new();
    let exprs = exprs.unwrap_or(&empty);
    for (name, e) in exprs {
        let Some(spec) = cap.params.iter().find(|s| s.name == *name) else {
            r.errors
                .push(format!("task {}: unknown parameter {name}", node.label()));
            continue;
        };
        match e.type_of(&p.variables) {
            Ok(k) if k != spec.data_kind => r.errors.push(format!(
                "task {}: parameter {name} is {k}, expected {}",
                node.label(),
                spec.data_kind
            )),
            Ok(_) => {
                if let Expr::Lit(v) = e {
                    if let Err(msg) = spec.check(v) {
                        r.errors.push(format!("task {}: parameter {name}: {msg}", node.label()));
                    }
                }
            }
            Err(err) => r.errors.push(format!("task {}: parameter {name}: {err}", node.label())),
        }
    }
    for spec in &cap.params {
        if spec.default.is_none() && !exprs.contains_key(&spec.name) {
            r.errors
                .push(format!("task {}: missing parameter {}", node.label(), spec.name));
        }
    }
}

fn reach(from: usize, adj: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut q = VecDeque::from([from]);
    seen[from] = true;
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                q.push_back(w);
            }
        }
    }
    seen
}

/// Dominator sets over the nodes reachable from `start`, by fixed-point iteration.
fn dominators(start: usize, succ: &[Vec<usize>], pred: &[Vec<usize>], live: &[bool]) -> Vec<HashSet<usize>> {
    let n = succ.len();
    let all: HashSet<usize> = (0..n).filter(|&i| live[i]).collect();
    let mut dom: Vec<HashSet<usize>> = (0..n)
        .map(|i| {
            if i == start {
                HashSet::from([start])
            } else {
                all.clone()
            }
        })
        .collect();
    let mut changed = true;
    while changed {
        changed = false;
        for v in 0..n {
            if v == start || !live[v] {
                continue;
            }
            let mut it = pred[v].iter().filter(|&&u| live[u]);
            let Some(&first) = it.next() else { continue };
            let mut d = dom[first].clone();
            for &u in it {
                d.retain(|x| dom[u].contains(x));
            }
            d.insert(v);
            if d != dom[v] {
                dom[v] = d;
                changed = true;
            }
        }
    }
    dom
}
