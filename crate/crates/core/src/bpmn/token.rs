//! Token marking over sequence flows.
//!
//! Tokens sit on flows; a service task that has taken a token holds it until
//! the task finishes. `created - consumed` always equals the live count.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::model::{BpmnProcess, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenStats {
    pub created: u64,
    pub consumed: u64,
    pub max_live: u64,
}

#[derive(Debug, Clone)]
pub struct TokenMachine {
    kinds: Vec<NodeKind>,
    in_flows: Vec<Vec<usize>>,
    out_flows: Vec<Vec<usize>>,
    marking: Vec<u32>,
    held: Vec<u32>,
    firings: Vec<u64>,
    stats: TokenStats,
    start: Option<usize>,
}

impl TokenMachine {
    /// Flows whose endpoints do not exist are ignored; validation reports them.
    pub fn new(p: &BpmnProcess) -> Self {
        let index: HashMap<&str, usize> = p
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.as_str(), i))
            .collect();
        let n = p.nodes.len();
        let mut in_flows = vec![Vec::new(); n];
        let mut out_flows = vec![Vec::new(); n];
        for (fi, f) in p.flows.iter().enumerate() {
            if let (Some(&s), Some(&t)) = (index.get(f.source.as_str()), index.get(f.target.as_str())) {
                out_flows[s].push(fi);
                in_flows[t].push(fi);
            }
        }
        TokenMachine {
            kinds: p.nodes.iter().map(|n| n.kind).collect(),
            in_flows,
            out_flows,
            marking: vec![0; p.flows.len()],
            held: vec![0; n],
            firings: vec![0; n],
            stats: TokenStats::default(),
            start: p.nodes.iter().position(|n| n.kind == NodeKind::StartEvent),
        }
    }

    pub fn start_node(&self) -> Option<usize> {
        self.start
    }

    pub fn out_flows(&self, node: usize) -> &[usize] {
        &self.out_flows[node]
    }

    pub fn marking(&self) -> &[u32] {
        &self.marking
    }

    pub fn firings(&self) -> &[u64] {
        &self.firings
    }

    pub fn stats(&self) -> TokenStats {
        self.stats
    }

    pub fn live(&self) -> u64 {
        self.marking.iter().map(|&m| m as u64).sum::<u64>() + self.held.iter().map(|&h| h as u64).sum::<u64>()
    }

    pub fn conserved(&self) -> bool {
        self.stats.created - self.stats.consumed == self.live()
    }

    fn produce(&mut self, flows: &[usize]) {
        for &f in flows {
            self.marking[f] += 1;
        }
        self.stats.created += flows.len() as u64;
        self.stats.max_live = self.stats.max_live.max(self.live());
    }

    /// Fires the start event: one token on each outgoing flow.
    pub fn fire_start(&mut self) -> Option<usize> {
        let s = self.start?;
        self.firings[s] += 1;
        let out = self.out_flows[s].clone();
        self.produce(&out);
        Some(s)
    }

    pub fn is_enabled(&self, node: usize) -> bool {
        let ins = &self.in_flows[node];
        match self.kinds[node] {
            NodeKind::StartEvent => false,
            NodeKind::ParallelGateway => !ins.is_empty() && ins.iter().all(|&f| self.marking[f] > 0),
            _ => ins.iter().any(|&f| self.marking[f] > 0),
        }
    }

    /// First enabled node in document order.
    pub fn next_enabled(&self) -> Option<usize> {
        (0..self.kinds.len()).find(|&n| self.is_enabled(n))
    }

    /// Consumes the node's input: one token from every incoming flow for a
    /// parallel gateway, else one token from the first marked incoming flow.
    pub fn take(&mut self, node: usize) {
        debug_assert!(self.is_enabled(node));
        self.firings[node] += 1;
        if self.kinds[node] == NodeKind::ParallelGateway {
            for &f in &self.in_flows[node] {
                self.marking[f] -= 1;
            }
            self.stats.consumed += self.in_flows[node].len() as u64;
        } else {
            let f = *self.in_flows[node]
                .iter()
                .find(|&&f| self.marking[f] > 0)
                .expect("enabled node has a marked input");
            self.marking[f] -= 1;
            self.stats.consumed += 1;
        }
        if self.kinds[node] == NodeKind::ServiceTask {
            self.held[node] += 1;
            self.stats.created += 1;
        }
    }

    /// Puts one token on each of `flows` (all outgoing flows for a fork, the
    /// chosen flow for an exclusive gateway).
    pub fn emit(&mut self, flows: &[usize]) {
        self.produce(flows);
    }

    /// Releases a task's held token and emits on all outgoing flows.
    pub fn complete_task(&mut self, node: usize) {
        self.release(node);
        let out = self.out_flows[node].clone();
        self.produce(&out);
    }

    /// Releases a task's held token without emitting (task failed).
    pub fn drop_task(&mut self, node: usize) {
        self.release(node);
    }

    fn release(&mut self, node: usize) {
        assert!(self.held[node] > 0, "task holds no token");
        self.held[node] -= 1;
        self.stats.consumed += 1;
    }
}
