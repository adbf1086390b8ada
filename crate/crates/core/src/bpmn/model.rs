use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::expr::Expr;
use crate::value::ValueKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    StartEvent,
    EndEvent,
    ServiceTask,
    ExclusiveGateway,
    ParallelGateway,
}

impl NodeKind {
    pub const ALL: [NodeKind; 5] = [
        NodeKind::StartEvent,
        NodeKind::EndEvent,
        NodeKind::ServiceTask,
        NodeKind::ExclusiveGateway,
        NodeKind::ParallelGateway,
    ];

    pub fn xml_name(self) -> &'static str {
        match self {
            NodeKind::StartEvent => "startEvent",
            NodeKind::EndEvent => "endEvent",
            NodeKind::ServiceTask => "serviceTask",
            NodeKind::ExclusiveGateway => "exclusiveGateway",
            NodeKind::ParallelGateway => "parallelGateway",
        }
    }
}

/// How a service task reaches a capability. `capability_id` is filled in by
/// binding resolution against a plant config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CapabilityBinding {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability_id: Option<String>,
    /// Raw `implementation` attribute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implementation: Option<String>,
    #[serde(default)]
    pub param_exprs: BTreeMap<String, Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpmnNode {
    pub node_id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<CapabilityBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_flow_id: Option<String>,
}

impl BpmnNode {
    pub fn new(node_id: impl Into<String>, kind: NodeKind, name: impl Into<String>) -> Self {
        BpmnNode {
            node_id: node_id.into(),
            kind,
            name: name.into(),
            binding: (kind == NodeKind::ServiceTask).then(CapabilityBinding::default),
            default_flow_id: None,
        }
    }

    /// Name for messages: the name if present, else the id.
    pub fn label(&self) -> &str {
        if self.name.trim().is_empty() {
            &self.node_id
        } else {
            &self.name
        }
    }

    pub fn capability_id(&self) -> Option<&str> {
        self.binding.as_ref()?.capability_id.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFlow {
    pub flow_id: String,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lane {
    pub lane_id: String,
    pub name: String,
    pub node_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BpmnProcess {
    pub process_id: String,
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<BpmnNode>,
    pub flows: Vec<SequenceFlow>,
    #[serde(default)]
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub variables: BTreeMap<String, ValueKind>,
}

impl BpmnProcess {
    pub fn node(&self, id: &str) -> Option<&BpmnNode> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.node_id == id)
    }

    pub fn flow(&self, id: &str) -> Option<&SequenceFlow> {
        self.flows.iter().find(|f| f.flow_id == id)
    }

    pub fn outgoing<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a SequenceFlow> + 'a {
        self.flows.iter().filter(move |f| f.source == node_id)
    }

    pub fn incoming<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a SequenceFlow> + 'a {
        self.flows.iter().filter(move |f| f.target == node_id)
    }

    pub fn lane_of(&self, node_id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.node_ids.iter().any(|n| n == node_id))
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn service_tasks(&self) -> impl Iterator<Item = &BpmnNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::ServiceTask)
    }
}
