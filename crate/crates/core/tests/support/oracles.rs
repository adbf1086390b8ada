//! Reference implementations used as test oracles. They share no code with
//! the engine beyond the data model.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use twinloop_core::bpmn::{BpmnProcess, CmpOp, Expr, NodeKind, Vars};
use twinloop_core::value::Value;

/// Tree-walking evaluator: `None` for any runtime error (missing variable,
/// wrong operand type, mixed-kind comparison).
pub fn naive_eval(e: &Expr, vars: &Vars) -> Option<Value> {
    match e {
        Expr::Lit(v) => Some(v.clone()),
        Expr::Var(n) => vars.get(n).cloned(),
        Expr::Not(a) => match naive_eval(a, vars)? {
            Value::Bool(b) => Some(Value::Bool(!b)),
            _ => None,
        },
        Expr::And(a, b) | Expr::Or(a, b) => {
            let x = naive_eval(a, vars)?;
            let y = naive_eval(b, vars)?;
            match (x, y) {
                (Value::Bool(x), Value::Bool(y)) => {
                    Some(Value::Bool(if matches!(e, Expr::And(..)) { x && y } else { x || y }))
                }
                _ => None,
            }
        }
        Expr::Cmp(op, a, b) => {
            let x = naive_eval(a, vars)?;
            let y = naive_eval(b, vars)?;
            let r = match (&x, &y) {
                (Value::Int(i), Value::Int(j)) => match op {
                    CmpOp::Eq => i == j,
                    CmpOp::Ne => i != j,
                    CmpOp::Lt => i < j,
                    CmpOp::Le => i <= j,
                    CmpOp::Gt => i > j,
                    CmpOp::Ge => i >= j,
                },
                (Value::Bool(_), Value::Bool(_)) | (Value::Text(_), Value::Text(_)) => match op {
                    CmpOp::Eq => x == y,
                    CmpOp::Ne => x != y,
                    _ => return None,
                },
                _ => return None,
            };
            Some(Value::Bool(r))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Terminal {
    /// Every token consumed. Carries per-node firing counts.
    Completed(Vec<u64>),
    /// Tokens left but nothing can fire.
    Deadlock(Vec<u64>),
    /// An exclusive gateway fired with no viable flow.
    NoPath,
    /// The firing budget ran out with some node still enabled.
    StepLimit,
}

impl Terminal {
    pub fn class(&self) -> &'static str {
        match self {
            Terminal::Completed(_) => "completed",
            Terminal::Deadlock(_) => "deadlock",
            Terminal::NoPath => "no_path",
            Terminal::StepLimit => "step_limit",
        }
    }
}

struct Net {
    kinds: Vec<NodeKind>,
    ins: Vec<Vec<usize>>,
    outs: Vec<Vec<usize>>,
    /// For exclusive gateways: the flow each firing takes, or None for no path.
    xor_choice: Vec<Option<usize>>,
}

fn net(p: &BpmnProcess, vars: &Vars) -> Net {
    let idx: HashMap<&str, usize> = p
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.as_str(), i))
        .collect();
    let n = p.nodes.len();
    let (mut ins, mut outs) = (vec![vec![]; n], vec![vec![]; n]);
    for (fi, f) in p.flows.iter().enumerate() {
        outs[idx[f.source.as_str()]].push(fi);
        ins[idx[f.target.as_str()]].push(fi);
    }
    let xor_choice = (0..n)
        .map(|v| {
            if p.nodes[v].kind != NodeKind::ExclusiveGateway {
                return None;
            }
            let default = p.nodes[v].default_flow_id.as_deref();
            let holds = |fi: &usize| {
                let f = &p.flows[*fi];
                Some(f.flow_id.as_str()) != default
                    && f.condition
                        .as_ref()
                        .is_none_or(|c| naive_eval(c, vars) == Some(Value::Bool(true)))
            };
            outs[v].iter().copied().find(holds).or_else(|| {
                outs[v]
                    .iter()
                    .copied()
                    .find(|&fi| Some(p.flows[fi].flow_id.as_str()) == default)
            })
        })
        .collect();
    Net {
        kinds: p.nodes.iter().map(|n| n.kind).collect(),
        ins,
        outs,
        xor_choice,
    }
}

/// Explores every interleaving of atomic node firings from the start event,
/// up to `budget` firings in total (the start firing included), and returns
/// the set of reachable terminal outcomes.
pub fn brute_force_outcomes(p: &BpmnProcess, vars: &Vars, budget: u64) -> BTreeSet<Terminal> {
    let net = net(p, vars);
    let start = p
        .nodes
        .iter()
        .position(|n| n.kind == NodeKind::StartEvent)
        .expect("start");
    let mut marking = vec![0u32; p.flows.len()];
    for &f in &net.outs[start] {
        marking[f] += 1;
    }
    let mut fired = vec![0u64; p.nodes.len()];
    fired[start] = 1;
    let mut out = BTreeSet::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(marking, fired)];
    while let Some((m, fired)) = stack.pop() {
        if !seen.insert((m.clone(), fired.clone())) {
            continue;
        }
        let enabled: Vec<usize> = (0..net.kinds.len())
            .filter(|&v| match net.kinds[v] {
                NodeKind::StartEvent => false,
                NodeKind::ParallelGateway => !net.ins[v].is_empty() && net.ins[v].iter().all(|&f| m[f] > 0),
                _ => net.ins[v].iter().any(|&f| m[f] > 0),
            })
            .collect();
        if enabled.is_empty() {
            out.insert(if m.iter().all(|&t| t == 0) {
                Terminal::Completed(fired)
            } else {
                Terminal::Deadlock(fired)
            });
            continue;
        }
        if fired.iter().sum::<u64>() >= budget {
            out.insert(Terminal::StepLimit);
            continue;
        }
        for v in enabled {
            let mut m2 = m.clone();
            if net.kinds[v] == NodeKind::ParallelGateway {
                for &f in &net.ins[v] {
                    m2[f] -= 1;
                }
            } else {
                let f = *net.ins[v].iter().find(|&&f| m2[f] > 0).unwrap();
                m2[f] -= 1;
            }
            let emit: Vec<usize> = match net.kinds[v] {
                NodeKind::ExclusiveGateway => match net.xor_choice[v] {
                    Some(f) => vec![f],
                    None => {
                        out.insert(Terminal::NoPath);
                        continue;
                    }
                },
                _ => net.outs[v].clone(),
            };
            for f in emit {
                m2[f] += 1;
            }
            let mut f2 = fired.clone();
            f2[v] += 1;
            stack.push((m2, f2));
        }
    }
    out
}
