//! Process generators for conformance sweeps: exhaustive small graphs and
//! randomized block-structured graphs.

use std::collections::BTreeMap;

use rand::Rng;

use super::expr::{Expr, Vars};
use super::model::{BpmnNode, BpmnProcess, NodeKind, SequenceFlow};
use super::validate::{structural_checks, ValidationReport};
use crate::value::{Value, ValueKind};

/// Variable tested by generated exclusive gateways.
pub const GUARD_VAR: &str = "go";

/// A generated process plus the variable values to run it with.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub process: BpmnProcess,
    pub vars: Vars,
}

const BODY_KINDS: [NodeKind; 4] = [
    NodeKind::EndEvent,
    NodeKind::ServiceTask,
    NodeKind::ExclusiveGateway,
    NodeKind::ParallelGateway,
];

fn node_name(kind: NodeKind, i: usize) -> String {
    match kind {
        NodeKind::StartEvent => "start".into(),
        NodeKind::EndEvent => format!("end{i}"),
        NodeKind::ServiceTask => format!("task{i}"),
        NodeKind::ExclusiveGateway => format!("xor{i}"),
        NodeKind::ParallelGateway => format!("and{i}"),
    }
}

fn build(kinds: &[NodeKind], targets: &[Vec<usize>]) -> BpmnProcess {
    let mut p = BpmnProcess {
        process_id: "generated".into(),
        variables: BTreeMap::from([(GUARD_VAR.to_string(), ValueKind::Boolean)]),
        ..Default::default()
    };
    for (i, &k) in kinds.iter().enumerate() {
        let id = node_name(k, i);
        let mut n = BpmnNode::new(id.clone(), k, id.clone());
        if let Some(b) = n.binding.as_mut() {
            b.capability_id = Some(format!("cap.{id}"));
        }
        p.nodes.push(n);
    }
    for (s, ts) in targets.iter().enumerate() {
        for (j, &t) in ts.iter().enumerate() {
            let flow_id = format!("f{s}_{t}");
            let xor = kinds[s] == NodeKind::ExclusiveGateway;
            let condition = (xor && j == 0).then(|| Expr::var(GUARD_VAR));
            if xor && j == 1 {
                p.nodes[s].default_flow_id = Some(flow_id.clone());
            }
            p.flows.push(SequenceFlow {
                flow_id,
                source: p.nodes[s].node_id.clone(),
                target: p.nodes[t].node_id.clone(),
                condition,
            });
        }
    }
    p
}

fn kind_multisets(len: usize, from: usize, prefix: &mut Vec<NodeKind>, out: &mut Vec<Vec<NodeKind>>) {
    if prefix.len() == len {
        out.push(prefix.clone());
        return;
    }
    for (k, &kind) in BODY_KINDS.iter().enumerate().skip(from) {
        prefix.push(kind);
        kind_multisets(len, k, prefix, out);
        prefix.pop();
    }
}

/// Out-neighbour choices for one node: single targets, and for gateways
/// also unordered pairs.
fn target_choices(kind: NodeKind, me: usize, n: usize) -> Vec<Vec<usize>> {
    let others: Vec<usize> = (1..n).filter(|&t| t != me).collect();
    match kind {
        NodeKind::EndEvent => vec![vec![]],
        NodeKind::StartEvent | NodeKind::ServiceTask => others.iter().map(|&t| vec![t]).collect(),
        NodeKind::ExclusiveGateway | NodeKind::ParallelGateway => {
            let mut v: Vec<Vec<usize>> = others.iter().map(|&t| vec![t]).collect();
            for (i, &a) in others.iter().enumerate() {
                for &b in &others[i + 1..] {
                    v.push(vec![a, b]);
                    if kind == NodeKind::ExclusiveGateway {
                        v.push(vec![b, a]);
                    }
                }
            }
            v
        }
    }
}

/// Every structurally valid process of 2..=`max_nodes` nodes in the
/// enumeration space, each paired with both values of [`GUARD_VAR`].
///
/// The space: node 0 is the start event; the other nodes form a
/// non-decreasing kind sequence over (end, task, exclusive, parallel) with at
/// least one end event; start and tasks have one outgoing flow, gateways one
/// or two, end events none; no self-loops and nothing flows into the start.
/// An exclusive gateway's first flow is guarded by `go` and its second flow,
/// if any, is the default.
pub fn exhaustive_small_graphs(max_nodes: usize) -> Vec<Case> {
    let mut cases = Vec::new();
    for n in 2..=max_nodes {
        let mut multisets = Vec::new();
        kind_multisets(n - 1, 0, &mut Vec::new(), &mut multisets);
        for body in multisets.into_iter().filter(|b| b.contains(&NodeKind::EndEvent)) {
            let mut kinds = vec![NodeKind::StartEvent];
            kinds.extend(body);
            let choices: Vec<Vec<Vec<usize>>> = (0..n).map(|i| target_choices(kinds[i], i, n)).collect();
            let mut pick = vec![0usize; n];
            'odometer: loop {
                let targets: Vec<Vec<usize>> = (0..n).map(|i| choices[i][pick[i]].clone()).collect();
                let p = build(&kinds, &targets);
                let mut r = ValidationReport::default();
                structural_checks(&p, &mut r);
                if r.is_ok() {
                    for go in [true, false] {
                        cases.push(Case {
                            process: p.clone(),
                            vars: Vars::from([(GUARD_VAR.to_string(), Value::Bool(go))]),
                        });
                    }
                }
                for i in 0..n {
                    pick[i] += 1;
                    if pick[i] < choices[i].len() {
                        continue 'odometer;
                    }
                    pick[i] = 0;
                }
                break;
            }
        }
    }
    cases
}

struct Builder {
    kinds: Vec<NodeKind>,
    edges: Vec<(usize, usize, Option<Expr>)>,
    defaults: BTreeMap<usize, usize>,
    guards: usize,
}

impl Builder {
    fn add(&mut self, k: NodeKind) -> usize {
        self.kinds.push(k);
        self.kinds.len() - 1
    }

    fn edge(&mut self, a: usize, b: usize) -> usize {
        self.edges.push((a, b, None));
        self.edges.len() - 1
    }

    /// Builds a block between `entry` and a returned exit node.
    fn block<R: Rng>(&mut self, rng: &mut R, entry: usize, budget: usize) -> usize {
        if budget <= 1 {
            let t = self.add(NodeKind::ServiceTask);
            self.edge(entry, t);
            return t;
        }
        match rng.random_range(0..4) {
            0 => {
                let mid = self.block(rng, entry, budget / 2);
                self.block(rng, mid, budget - budget / 2)
            }
            1 => {
                let fork = self.add(NodeKind::ParallelGateway);
                self.edge(entry, fork);
                let k = rng.random_range(2..=3);
                let exits: Vec<usize> = (0..k).map(|_| self.block(rng, fork, (budget - 1) / k)).collect();
                let join = self.add(NodeKind::ParallelGateway);
                for e in exits {
                    self.edge(e, join);
                }
                join
            }
            2 => {
                let split = self.add(NodeKind::ExclusiveGateway);
                self.edge(entry, split);
                let k = rng.random_range(2..=3);
                let exits: Vec<usize> = (0..k).map(|_| self.block(rng, split, (budget - 1) / k)).collect();
                // Outgoing flows of `split` in creation order: guard all but
                // possibly the last, which becomes the default.
                let outs: Vec<usize> = (0..self.edges.len()).filter(|&e| self.edges[e].0 == split).collect();
                let with_default = rng.random_bool(0.8);
                for (i, &e) in outs.iter().enumerate() {
                    if with_default && i + 1 == outs.len() {
                        self.defaults.insert(split, e);
                    } else {
                        let v = format!("c{}", rng.random_range(0..self.guards));
                        let cond = if rng.random_bool(0.5) {
                            Expr::var(&v)
                        } else {
                            Expr::Not(Box::new(Expr::var(&v)))
                        };
                        self.edges[e].2 = Some(cond);
                    }
                }
                let merge = self.add(NodeKind::ExclusiveGateway);
                for e in exits {
                    self.edge(e, merge);
                }
                merge
            }
            _ => {
                let t = self.add(NodeKind::ServiceTask);
                self.edge(entry, t);
                self.block(rng, t, budget - 1)
            }
        }
    }
}

/// A random block-structured process of roughly `budget` tasks. With
/// `mutate`, one flow is rewired to a random node, which can produce
/// unmatched joins, cycles or dead ends.
pub fn random_process<R: Rng>(rng: &mut R, budget: usize, mutate: bool) -> Case {
    let guards = 3;
    let mut b = Builder {
        kinds: vec![NodeKind::StartEvent],
        edges: Vec::new(),
        defaults: BTreeMap::new(),
        guards,
    };
    let exit = b.block(rng, 0, budget.max(1));
    let end = b.add(NodeKind::EndEvent);
    b.edge(exit, end);
    if mutate && b.edges.len() > 2 {
        let e = rng.random_range(1..b.edges.len());
        let t = rng.random_range(1..b.kinds.len());
        if t != b.edges[e].0 {
            b.edges[e].1 = t;
        }
    }
    let mut p = BpmnProcess {
        process_id: "random".into(),
        variables: (0..guards).map(|i| (format!("c{i}"), ValueKind::Boolean)).collect(),
        ..Default::default()
    };
    for (i, &k) in b.kinds.iter().enumerate() {
        let id = node_name(k, i);
        let mut n = BpmnNode::new(id.clone(), k, id.clone());
        if let Some(bd) = n.binding.as_mut() {
            bd.capability_id = Some(format!("cap.{id}"));
        }
        p.nodes.push(n);
    }
    for (i, (s, t, c)) in b.edges.iter().enumerate() {
        p.flows.push(SequenceFlow {
            flow_id: format!("f{i}"),
            source: p.nodes[*s].node_id.clone(),
            target: p.nodes[*t].node_id.clone(),
            condition: c.clone(),
        });
    }
    for (&g, &e) in &b.defaults {
        p.nodes[g].default_flow_id = Some(p.flows[e].flow_id.clone());
    }
    let vars = (0..guards)
        .map(|i| (format!("c{i}"), Value::Bool(rng.random())))
        .collect();
    Case { process: p, vars }
}
