//! Task graphs, recovery augmentation, shortest-path cost-to-go and the forward-moving filter.

use serde::{Deserialize, Serialize};
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::monitors::{ConstraintSpec, DetectorTemplate, DEFAULT_EPSILON, DEFAULT_K};
use crate::simworld::{estimate_program_steps, Arm, AtomicActionSpec};

pub type NodeId = String;
pub type EdgeId = String;

/// Slack used when comparing path costs.
pub const COST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("graph has no terminal node `{0}`")]
    NoTerminal(String),
    #[error("terminal `{terminal}` is unreachable from `{start}` via nominal edges")]
    TerminalUnreachable { start: NodeId, terminal: NodeId },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("invalid node `{id}`: {reason}")]
    InvalidNode { id: NodeId, reason: String },
    #[error("invalid edge `{id}`: {reason}")]
    InvalidEdge { id: EdgeId, reason: String },
    #[error("failure mode references unknown nominal edge `{0}`")]
    UnknownNominalEdge(EdgeId),
    #[error("recovery for `{edge}`/`{failure}` names missing merge target `{target}`")]
    MergeTargetMissing {
        edge: EdgeId,
        failure: String,
        target: NodeId,
    },
    #[error("invalid recovery for `{edge}`/`{failure}`: {reason}")]
    InvalidRecovery {
        edge: EdgeId,
        failure: String,
        reason: String,
    },
    #[error("edge `{edge}` has no failure mode `{failure}`")]
    UnknownFailureMode { edge: EdgeId, failure: String },
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown edge `{0}`")]
    UnknownEdge(EdgeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    #[default]
    Nominal,
    Recovery,
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmIntent {
    pub closed: bool,
    /// Target opening (m).
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: NodeId,
    #[serde(default)]
    pub kind: NodeKind,
    #[serde(default)]
    pub sub_goals: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gripper_intent: BTreeMap<Arm, ArmIntent>,
}

/// An anticipated deviation on an edge: detector, trigger parameters and recovery mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureMode {
    pub id: String,
    pub detector: DetectorTemplate,
    pub epsilon: f64,
    pub k: usize,
    pub recovery_edge: Option<EdgeId>,
}

impl FailureMode {
    fn validate(&self) -> Result<(), String> {
        if self.k < 1 {
            return Err(format!("failure mode `{}`: k must be >= 1", self.id));
        }
        if !(self.epsilon >= 0.0) {
            return Err(format!("failure mode `{}`: epsilon must be >= 0", self.id));
        }
        self.detector
            .validate()
            .map_err(|e| format!("failure mode `{}`: {e}", self.id))
    }
}

impl Serialize for FailureMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::Error;
        let mut v = serde_json::to_value(&self.detector).map_err(S::Error::custom)?;
        let map = v.as_object_mut().expect("templates serialize as objects");
        map.insert("id".into(), self.id.clone().into());
        map.insert("epsilon".into(), self.epsilon.into());
        map.insert("k".into(), self.k.into());
        if let Some(r) = &self.recovery_edge {
            map.insert("recovery_edge".into(), r.clone().into());
        }
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FailureMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut map = serde_json::Map::deserialize(d)?;
        let id = match map.remove("id") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(D::Error::custom("failure mode `id` must be a string")),
            None => return Err(D::Error::missing_field("id")),
        };
        let epsilon = match map.remove("epsilon") {
            None => DEFAULT_EPSILON,
            Some(v) => v
                .as_f64()
                .ok_or_else(|| D::Error::custom("failure mode `epsilon` must be a number"))?,
        };
        let k = match map.remove("k") {
            None => DEFAULT_K,
            Some(v) => v
                .as_u64()
                .filter(|k| *k >= 1)
                .ok_or_else(|| D::Error::custom("failure mode `k` must be a positive integer"))?
                as usize,
        };
        let recovery_edge = match map.remove("recovery_edge") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s),
            Some(_) => return Err(D::Error::custom("`recovery_edge` must be a string")),
        };
        let detector = DetectorTemplate::deserialize(serde_json::Value::Object(map))
            .map_err(|e| D::Error::custom(format!("failure mode `{id}`: {e}")))?;
        Ok(FailureMode {
            id,
            detector,
            epsilon,
            k,
            recovery_edge,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    #[default]
    Nominal,
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    #[serde(default)]
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path_constraints: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_modes: Vec<FailureMode>,
    #[serde(default)]
    pub program: Vec<AtomicActionSpec>,
    /// Expected execution steps; defaults to the program's estimate.
    #[serde(default)]
    pub weight: Option<f64>,
}

impl Edge {
    pub fn weight(&self) -> f64 {
        self.weight
            .unwrap_or_else(|| estimate_program_steps(&self.program) as f64)
    }

    pub fn is_recovery(&self) -> bool {
        self.kind == EdgeKind::Recovery
    }
}

/// Graph section of a task document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub start: NodeId,
    pub terminal: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryNodeDoc {
    pub id: NodeId,
    #[serde(default)]
    pub sub_goals: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gripper_intent: BTreeMap<Arm, ArmIntent>,
}

/// One recovery branch: the failure it handles and how execution re-enters the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryDoc {
    /// Nominal edge the failure can occur on.
    pub edge: EdgeId,
    pub failure: FailureMode,
    #[serde(default)]
    pub intent: String,
    /// `null` routes the recovery edge straight to the single merge target.
    #[serde(default)]
    pub recovery_node: Option<RecoveryNodeDoc>,
    pub merge_targets: Vec<NodeId>,
    #[serde(default)]
    pub entry_program: Vec<AtomicActionSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub merge_programs: BTreeMap<NodeId, Vec<AtomicActionSpec>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, f64>,
}

impl RecoveryDoc {
    fn entry_weight(&self) -> Option<f64> {
        self.weights.get("entry").copied()
    }
}

/// Task graph; after [`augment`] it also holds recovery nodes and edges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub start: NodeId,
    pub terminal: NodeId,
    /// Merge candidates per recovery node.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub merge_candidates: BTreeMap<NodeId, Vec<NodeId>>,
    /// Failure context per recovery node.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub failure_contexts: BTreeMap<NodeId, NodeId>,
}

pub type AugmentedGraph = TaskGraph;

impl<'de> Deserialize<'de> for TaskGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            nodes: Vec<Node>,
            edges: Vec<Edge>,
            start: NodeId,
            terminal: NodeId,
            #[serde(default)]
            merge_candidates: BTreeMap<NodeId, Vec<NodeId>>,
            #[serde(default)]
            failure_contexts: BTreeMap<NodeId, NodeId>,
        }
        let raw = Raw::deserialize(d)?;
        let g = TaskGraph {
            nodes: raw.nodes,
            edges: raw.edges,
            start: raw.start,
            terminal: raw.terminal,
            merge_candidates: raw.merge_candidates,
            failure_contexts: raw.failure_contexts,
        };
        g.validate_structure().map_err(serde::de::Error::custom)?;
        Ok(g)
    }
}

impl TaskGraph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn is_augmented(&self) -> bool {
        self.edges.iter().any(Edge::is_recovery)
    }

    pub fn recovery_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Recovery)
    }

    /// Outgoing edges: nominal first, then recovery, each in declaration order.
    pub fn outgoing(&self, node: &str) -> Vec<&Edge> {
        let mut out: Vec<&Edge> = self
            .edges
            .iter()
            .filter(|e| e.from == node && !e.is_recovery())
            .collect();
        out.extend(self.edges.iter().filter(|e| e.from == node && e.is_recovery()));
        out
    }

    fn validate_structure(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
        }
        let mut eids = BTreeSet::new();
        for e in &self.edges {
            if !eids.insert(e.id.as_str()) {
                return Err(GraphError::DuplicateId(e.id.clone()));
            }
            for end in [&e.from, &e.to] {
                if !ids.contains(end.as_str()) {
                    return Err(GraphError::DanglingReference(format!(
                        "edge `{}` references missing node `{end}`",
                        e.id
                    )));
                }
            }
            if e.from == e.to && !e.is_recovery() {
                return Err(GraphError::InvalidEdge {
                    id: e.id.clone(),
                    reason: "self-loops are only allowed on recovery edges".into(),
                });
            }
            if let Some(w) = e.weight {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(GraphError::InvalidEdge {
                        id: e.id.clone(),
                        reason: "weight must be a finite nonnegative number".into(),
                    });
                }
            }
            for m in &e.failure_modes {
                m.validate().map_err(|reason| GraphError::InvalidEdge {
                    id: e.id.clone(),
                    reason,
                })?;
            }
        }
        if !ids.contains(self.start.as_str()) {
            return Err(GraphError::DanglingReference(format!(
                "start node `{}` is missing",
                self.start
            )));
        }
        let Some(term) = self.node(&self.terminal) else {
            return Err(GraphError::NoTerminal(self.terminal.clone()));
        };
        if term.kind != NodeKind::Terminal {
            return Err(GraphError::InvalidNode {
                id: term.id.clone(),
                reason: "the terminal node must have kind `terminal`".into(),
            });
        }
        if let Some(other) = self
            .nodes
            .iter()
            .find(|n| n.kind == NodeKind::Terminal && n.id != self.terminal)
        {
            return Err(GraphError::InvalidNode {
                id: other.id.clone(),
                reason: "only one terminal node is allowed".into(),
            });
        }
        if !self.nominal_reachable(&self.start).contains(self.terminal.as_str()) {
            return Err(GraphError::TerminalUnreachable {
                start: self.start.clone(),
                terminal: self.terminal.clone(),
            });
        }
        for m in self.edges.iter().flat_map(|e| &e.failure_modes) {
            if let Some(r) = &m.recovery_edge {
                if self.edge(r).is_none() {
                    return Err(GraphError::DanglingReference(format!(
                        "failure mode `{}` maps to missing edge `{r}`",
                        m.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn nominal_reachable<'a>(&'a self, from: &'a str) -> BTreeSet<&'a str> {
        let mut seen = BTreeSet::from([from]);
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.from == u && !e.is_recovery()) {
                if seen.insert(e.to.as_str()) {
                    stack.push(e.to.as_str());
                }
            }
        }
        seen
    }

    /// Shortest-path cost between two nodes over all edges; `None` when unreachable.
    pub fn dist(&self, u: &str, v: &str) -> Result<Option<f64>, GraphError> {
        Ok(self.shortest_path(u, v)?.map(|(c, _)| c))
    }

    /// Shortest path with ties broken toward lexicographically smaller node ids.
    pub fn shortest_path(&self, u: &str, v: &str) -> Result<Option<(f64, Vec<NodeId>)>, GraphError> {
        for id in [u, v] {
            if self.node(id).is_none() {
                return Err(GraphError::UnknownNode(id.to_string()));
            }
        }
        let mut best: BTreeMap<&str, f64> = BTreeMap::from([(u, 0.0)]);
        let mut pred: BTreeMap<&str, &str> = BTreeMap::new();
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut heap = BinaryHeap::from([Reverse((Cost(0.0), u))]);
        while let Some(Reverse((Cost(c), x))) = heap.pop() {
            if !done.insert(x) {
                continue;
            }
            if x == v {
                break;
            }
            for e in self.edges.iter().filter(|e| e.from == x) {
                let y = e.to.as_str();
                if done.contains(y) {
                    continue;
                }
                let nc = c + e.weight();
                let better = match best.get(y) {
                    None => true,
                    Some(&old) => nc < old || (nc == old && pred.get(y).is_some_and(|p| x < *p)),
                };
                if better {
                    best.insert(y, nc);
                    pred.insert(y, x);
                    heap.push(Reverse((Cost(nc), y)));
                }
            }
        }
        let Some(&cost) = best.get(v) else {
            return Ok(None);
        };
        let mut path = vec![v.to_string()];
        let mut cur = v;
        while cur != u {
            cur = pred[cur];
            path.push(cur.to_string());
        }
        path.reverse();
        Ok(Some((cost, path)))
    }

    /// Cost-to-go to `target` for every node that can reach it.
    pub fn dists_to(&self, target: &str) -> BTreeMap<NodeId, f64> {
        let mut best: BTreeMap<&str, f64> = BTreeMap::from([(target, 0.0)]);
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut heap = BinaryHeap::from([Reverse((Cost(0.0), target))]);
        while let Some(Reverse((Cost(c), x))) = heap.pop() {
            if !done.insert(x) {
                continue;
            }
            for e in self.edges.iter().filter(|e| e.to == x) {
                let y = e.from.as_str();
                let nc = c + e.weight();
                if best.get(y).is_none_or(|old| nc < *old) {
                    best.insert(y, nc);
                    heap.push(Reverse((Cost(nc), y)));
                }
            }
        }
        best.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The pre-compiled recovery edge for `failure_id` on `edge_id`.
    pub fn recovery_target(&self, edge_id: &str, failure_id: &str) -> Result<EdgeId, GraphError> {
        let edge = self
            .edge(edge_id)
            .ok_or_else(|| GraphError::UnknownEdge(edge_id.to_string()))?;
        recovery_target(edge, failure_id)
    }

    /// Checks the structural invariants of an augmented graph.
    pub fn validate_augmented(&self) -> Result<(), GraphError> {
        self.validate_structure()?;
        for r in self.recovery_nodes() {
            let inbound = self.edges.iter().any(|e| e.to == r.id && e.is_recovery());
            let outbound = self.edges.iter().any(|e| e.from == r.id && e.is_recovery());
            if !inbound || !outbound {
                return Err(GraphError::InvalidNode {
                    id: r.id.clone(),
                    reason: "recovery nodes need an inbound and an outbound recovery edge".into(),
                });
            }
        }
        for e in &self.edges {
            for m in &e.failure_modes {
                let target = m
                    .recovery_edge
                    .as_deref()
                    .and_then(|r| self.edge(r))
                    .ok_or_else(|| GraphError::UnknownFailureMode {
                        edge: e.id.clone(),
                        failure: m.id.clone(),
                    })?;
                if target.from != e.from {
                    return Err(GraphError::InvalidEdge {
                        id: target.id.clone(),
                        reason: format!("recovery edge must start at failure context `{}`", e.from),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Validates a graph document.
pub fn build_graph(doc: GraphDoc) -> Result<TaskGraph, GraphError> {
    if let Some(n) = doc.nodes.iter().find(|n| n.kind == NodeKind::Recovery) {
        return Err(GraphError::InvalidNode {
            id: n.id.clone(),
            reason: "recovery nodes are added by augmentation".into(),
        });
    }
    if let Some(e) = doc.edges.iter().find(|e| e.is_recovery()) {
        return Err(GraphError::InvalidEdge {
            id: e.id.clone(),
            reason: "recovery edges are added by augmentation".into(),
        });
    }
    let graph = TaskGraph {
        nodes: doc.nodes,
        edges: doc.edges,
        start: doc.start,
        terminal: doc.terminal,
        merge_candidates: BTreeMap::new(),
        failure_contexts: BTreeMap::new(),
    };
    graph.validate_structure()?;
    Ok(graph)
}

/// Adds recovery nodes and edges and populates the recovery mapping. Entries already
/// present with identical content are skipped.
pub fn augment(graph: &TaskGraph, recovery: &[RecoveryDoc]) -> Result<AugmentedGraph, GraphError> {
    let mut g = graph.clone();
    for r in recovery {
        let invalid = |reason: &str| GraphError::InvalidRecovery {
            edge: r.edge.clone(),
            failure: r.failure.id.clone(),
            reason: reason.to_string(),
        };
        let edge = g
            .edge(&r.edge)
            .filter(|e| !e.is_recovery())
            .ok_or_else(|| GraphError::UnknownNominalEdge(r.edge.clone()))?
            .clone();
        if r.merge_targets.is_empty() {
            return Err(invalid("at least one merge target is required"));
        }
        for t in &r.merge_targets {
            if g.node(t).is_none_or(|n| n.kind == NodeKind::Recovery) {
                return Err(GraphError::MergeTargetMissing {
                    edge: r.edge.clone(),
                    failure: r.failure.id.clone(),
                    target: t.clone(),
                });
            }
        }
        let fail = edge.from.clone();
        let base = format!("rec:{}:{}", r.edge, r.failure.id);

        // A recovery node whose sub-goals coincide with an existing nominal node
        // is replaced by a direct route to that node.
        let reused = r.recovery_node.as_ref().and_then(|rn| {
            g.nodes
                .iter()
                .find(|n| n.kind != NodeKind::Recovery && !rn.sub_goals.is_empty() && n.sub_goals == rn.sub_goals)
                .map(|n| n.id.clone())
        });

        let mut new_nodes = Vec::new();
        let mut new_edges = Vec::new();
        let entry_id;
        match (&r.recovery_node, reused) {
            (None, _) | (Some(_), Some(_)) => {
                let target = match &r.recovery_node {
                    None => {
                        if r.merge_targets.len() != 1 {
                            return Err(invalid("a direct recovery route needs exactly one merge target"));
                        }
                        r.merge_targets[0].clone()
                    }
                    Some(_) => g
                        .nodes
                        .iter()
                        .find(|n| Some(&n.sub_goals) == r.recovery_node.as_ref().map(|x| &x.sub_goals))
                        .map(|n| n.id.clone())
                        .expect("reused node exists"),
                };
                entry_id = base.clone();
                new_edges.push(Edge {
                    id: base.clone(),
                    from: fail.clone(),
                    to: target,
                    kind: EdgeKind::Recovery,
                    path_constraints: Vec::new(),
                    failure_modes: Vec::new(),
                    program: r.entry_program.clone(),
                    weight: r.entry_weight(),
                });
            }
            (Some(rn), None) => {
                new_nodes.push(Node {
                    id: rn.id.clone(),
                    kind: NodeKind::Recovery,
                    sub_goals: rn.sub_goals.clone(),
                    gripper_intent: rn.gripper_intent.clone(),
                });
                entry_id = format!("{base}:in");
                new_edges.push(Edge {
                    id: entry_id.clone(),
                    from: fail.clone(),
                    to: rn.id.clone(),
                    kind: EdgeKind::Recovery,
                    path_constraints: Vec::new(),
                    failure_modes: Vec::new(),
                    program: r.entry_program.clone(),
                    weight: r.entry_weight(),
                });
                for t in &r.merge_targets {
                    new_edges.push(Edge {
                        id: format!("{base}:{t}"),
                        from: rn.id.clone(),
                        to: t.clone(),
                        kind: EdgeKind::Recovery,
                        path_constraints: Vec::new(),
                        failure_modes: Vec::new(),
                        program: r.merge_programs.get(t).cloned().unwrap_or_default(),
                        weight: r.weights.get(t).copied(),
                    });
                }
            }
        }
        let mode = FailureMode {
            recovery_edge: Some(entry_id),
            ..r.failure.clone()
        };
        mode.validate().map_err(|reason| invalid(&reason))?;

        let existing = edge.failure_modes.iter().find(|m| m.id == mode.id);
        if let Some(old) = existing {
            let same_nodes = new_nodes.iter().all(|n| g.node(&n.id) == Some(n));
            let same_edges = new_edges.iter().all(|e| g.edge(&e.id) == Some(e));
            if *old == mode && same_nodes && same_edges {
                continue;
            }
            return Err(GraphError::DuplicateId(format!("{}/{}", r.edge, mode.id)));
        }
        for n in &new_nodes {
            if g.node(&n.id).is_some() {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
        }
        for e in &new_edges {
            if g.edge(&e.id).is_some() {
                return Err(GraphError::DuplicateId(e.id.clone()));
            }
        }
        if let Some(rn) = new_nodes.first() {
            g.merge_candidates.insert(rn.id.clone(), r.merge_targets.clone());
            g.failure_contexts.insert(rn.id.clone(), fail.clone());
        }
        g.nodes.extend(new_nodes);
        g.edges.extend(new_edges);
        g.edges
            .iter_mut()
            .find(|e| e.id == r.edge)
            .expect("edge exists")
            .failure_modes
            .push(mode);
    }
    g.validate_augmented()?;
    Ok(g)
}

pub fn recovery_target(edge: &Edge, failure_id: &str) -> Result<EdgeId, GraphError> {
    edge.failure_modes
        .iter()
        .find(|m| m.id == failure_id)
        .and_then(|m| m.recovery_edge.clone())
        .ok_or_else(|| GraphError::UnknownFailureMode {
            edge: edge.id.clone(),
            failure: failure_id.to_string(),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedBranch {
    /// Recovery node id, or the recovery edge id for direct routes.
    pub branch: String,
    pub failure_context: NodeId,
    pub dist_recovery: Option<f64>,
    pub dist_failure: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedFailureMode {
    pub edge: EdgeId,
    pub failure: String,
}

/// Branches removed by [`filter_forward_moving`].
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RejectionReport {
    pub rejected: Vec<RejectedBranch>,
    pub pruned_merge_edges: Vec<EdgeId>,
    pub dropped_failure_modes: Vec<DroppedFailureMode>,
}

impl RejectionReport {
    pub fn is_empty(&self) -> bool {
        self.rejected.is_empty() && self.pruned_merge_edges.is_empty()
    }
}

/// Keeps only recovery branches that do not increase the cost-to-go to the terminal,
/// measured from the failure context on the unfiltered augmented graph.
pub fn filter_forward_moving(graph: &AugmentedGraph) -> (AugmentedGraph, RejectionReport) {
    let d = graph.dists_to(&graph.terminal);
    let dist = |n: &str| d.get(n).copied();
    let ok = |rec: Option<f64>, fail: Option<f64>| match (rec, fail) {
        (None, _) => false,
        (Some(_), None) => true,
        (Some(r), Some(f)) => r <= f + COST_TOL,
    };
    let mut report = RejectionReport::default();
    let mut drop_nodes = BTreeSet::new();
    let mut drop_edges = BTreeSet::new();

    for r in graph.recovery_nodes() {
        let Some(fail) = graph.failure_contexts.get(&r.id) else {
            continue;
        };
        let (dr, df) = (dist(&r.id), dist(fail));
        if ok(dr, df) {
            for e in graph.edges.iter().filter(|e| e.from == r.id) {
                if !ok(dist(&e.to), df) {
                    drop_edges.insert(e.id.clone());
                    report.pruned_merge_edges.push(e.id.clone());
                }
            }
        } else {
            drop_nodes.insert(r.id.clone());
            for e in graph.edges.iter().filter(|e| e.from == r.id || e.to == r.id) {
                drop_edges.insert(e.id.clone());
            }
            report.rejected.push(RejectedBranch {
                branch: r.id.clone(),
                failure_context: fail.clone(),
                dist_recovery: dr,
                dist_failure: df,
                reason: if dr.is_none() {
                    "terminal unreachable from recovery node".into()
                } else {
                    "recovery increases cost-to-go".into()
                },
            });
        }
    }
    let recovery_ids: BTreeSet<&str> = graph.recovery_nodes().map(|n| n.id.as_str()).collect();
    for e in graph.edges.iter().filter(|e| e.is_recovery()) {
        let direct = !recovery_ids.contains(e.from.as_str()) && !recovery_ids.contains(e.to.as_str());
        if !direct {
            continue;
        }
        let (dt, df) = (dist(&e.to), dist(&e.from));
        if !ok(dt, df) {
            drop_edges.insert(e.id.clone());
            report.rejected.push(RejectedBranch {
                branch: e.id.clone(),
                failure_context: e.from.clone(),
                dist_recovery: dt,
                dist_failure: df,
                reason: if dt.is_none() {
                    "terminal unreachable from merge target".into()
                } else {
                    "recovery increases cost-to-go".into()
                },
            });
        }
    }

    let mut g = graph.clone();
    g.nodes.retain(|n| !drop_nodes.contains(&n.id));
    g.edges.retain(|e| !drop_edges.contains(&e.id));
    for n in &drop_nodes {
        g.merge_candidates.remove(n);
        g.failure_contexts.remove(n);
    }
    for (node, targets) in g.merge_candidates.iter_mut() {
        targets.retain(|t| {
            let id = graph
                .edges
                .iter()
                .find(|e| e.from == *node && e.to == *t)
                .map(|e| e.id.clone());
            id.is_none_or(|id| !drop_edges.contains(&id))
        });
    }
    for e in g.edges.iter_mut() {
        let edge_id = e.id.clone();
        e.failure_modes.retain(|m| {
            let keep = m
                .recovery_edge
                .as_ref()
                .is_none_or(|r| !drop_edges.contains(r));
            if !keep {
                report.dropped_failure_modes.push(DroppedFailureMode {
                    edge: edge_id.clone(),
                    failure: m.id.clone(),
                });
            }
            keep
        });
    }
    (g, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, kind: NodeKind) -> Node {
        Node {
            id: id.into(),
            kind,
            sub_goals: vec![],
            gripper_intent: BTreeMap::new(),
        }
    }

    fn edge(id: &str, from: &str, to: &str, w: f64) -> Edge {
        Edge {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            kind: EdgeKind::Nominal,
            path_constraints: vec![],
            failure_modes: vec![],
            program: vec![],
            weight: Some(w),
        }
    }

    fn chain(n: usize) -> TaskGraph {
        let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let nodes = ids
            .iter()
            .enumerate()
            .map(|(i, id)| node(id, if i + 1 == n { NodeKind::Terminal } else { NodeKind::Nominal }))
            .collect();
        let edges = (1..n)
            .map(|i| edge(&format!("e{i}"), &ids[i - 1], &ids[i], 1.0))
            .collect();
        build_graph(GraphDoc {
            nodes,
            edges,
            start: ids[0].clone(),
            terminal: ids[n - 1].clone(),
        })
        .unwrap()
    }

    fn failure(id: &str) -> FailureMode {
        FailureMode {
            id: id.into(),
            detector: DetectorTemplate::Tilt {
                object: "bottle".into(),
                theta_max: 0.35,
            },
            epsilon: 0.0,
            k: 3,
            recovery_edge: None,
        }
    }

    fn direct(edge: &str, fail: &str, target: &str) -> RecoveryDoc {
        RecoveryDoc {
            edge: edge.into(),
            failure: failure(fail),
            intent: "regrasp".into(),
            recovery_node: None,
            merge_targets: vec![target.into()],
            entry_program: vec![],
            merge_programs: BTreeMap::new(),
            weights: BTreeMap::from([("entry".to_string(), 1.0)]),
        }
    }

    #[test]
    fn chain_distances() {
        let g = chain(3);
        assert_eq!(g.dist("n0", "n2").unwrap(), Some(2.0));
        assert_eq!(g.dist("n2", "n0").unwrap(), None);
        assert_eq!(g.dist("n1", "n1").unwrap(), Some(0.0));
    }

    #[test]
    fn diamond_prefers_cheaper_branch() {
        let g = build_graph(GraphDoc {
            nodes: vec![
                node("A", NodeKind::Nominal),
                node("B", NodeKind::Nominal),
                node("C", NodeKind::Nominal),
                node("D", NodeKind::Terminal),
            ],
            edges: vec![
                edge("ab", "A", "B", 1.0),
                edge("bd", "B", "D", 1.0),
                edge("ac", "A", "C", 3.0),
                edge("cd", "C", "D", 1.0),
            ],
            start: "A".into(),
            terminal: "D".into(),
        })
        .unwrap();
        let (c, path) = g.shortest_path("A", "D").unwrap().unwrap();
        assert_eq!(c, 2.0);
        assert_eq!(path, vec!["A", "B", "D"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let g = build_graph(GraphDoc {
            nodes: vec![
                node("A", NodeKind::Nominal),
                node("C", NodeKind::Nominal),
                node("B", NodeKind::Nominal),
                node("D", NodeKind::Terminal),
            ],
            edges: vec![
                edge("ac", "A", "C", 1.0),
                edge("cd", "C", "D", 1.0),
                edge("ab", "A", "B", 1.0),
                edge("bd", "B", "D", 1.0),
            ],
            start: "A".into(),
            terminal: "D".into(),
        })
        .unwrap();
        let (_, path) = g.shortest_path("A", "D").unwrap().unwrap();
        assert_eq!(path, vec!["A", "B", "D"]);
    }

    #[test]
    fn trivial_graph_is_valid() {
        let g = build_graph(GraphDoc {
            nodes: vec![node("only", NodeKind::Terminal)],
            edges: vec![],
            start: "only".into(),
            terminal: "only".into(),
        })
        .unwrap();
        assert!(g.outgoing("only").is_empty());
    }

    #[test]
    fn dangling_and_terminal_errors() {
        let mut doc = GraphDoc {
            nodes: vec![node("A", NodeKind::Nominal), node("B", NodeKind::Terminal)],
            edges: vec![edge("ax", "A", "X", 1.0)],
            start: "A".into(),
            terminal: "B".into(),
        };
        assert!(matches!(build_graph(doc.clone()), Err(GraphError::DanglingReference(_))));
        doc.edges.clear();
        assert!(matches!(build_graph(doc.clone()), Err(GraphError::TerminalUnreachable { .. })));
        doc.terminal = "Z".into();
        assert!(matches!(build_graph(doc.clone()), Err(GraphError::NoTerminal(_))));
        doc.terminal = "B".into();
        doc.edges = vec![edge("aa", "A", "A", 1.0), edge("ab", "A", "B", 1.0)];
        assert!(matches!(build_graph(doc), Err(GraphError::InvalidEdge { .. })));
    }

    #[test]
    fn direct_route_adds_no_node() {
        let g = augment(&chain(4), &[direct("e2", "drop", "n1")]).unwrap();
        assert_eq!(g.recovery_nodes().count(), 0);
        let rec = g.edge("rec:e2:drop").unwrap();
        assert_eq!((rec.from.as_str(), rec.to.as_str()), ("n1", "n1"));
        assert_eq!(g.recovery_target("e2", "drop").unwrap(), "rec:e2:drop");
        assert!(matches!(
            g.recovery_target("e2", "slip"),
            Err(GraphError::UnknownFailureMode { .. })
        ));
    }

    #[test]
    fn recovery_node_adds_in_and_out_edges() {
        let mut r = direct("e2", "shift", "n2");
        r.recovery_node = Some(RecoveryNodeDoc {
            id: "realigned".into(),
            sub_goals: vec![DetectorTemplate::Tilt {
                object: "cup".into(),
                theta_max: 0.2,
            }],
            gripper_intent: BTreeMap::new(),
        });
        let g = augment(&chain(4), &[r]).unwrap();
        assert_eq!(g.recovery_nodes().count(), 1);
        assert!(g.edge("rec:e2:shift:in").is_some());
        assert!(g.edge("rec:e2:shift:n2").is_some());
        assert_eq!(g.outgoing("n1").last().unwrap().id, "rec:e2:shift:in");
        assert_eq!(g.outgoing("n1")[0].id, "e2");
    }

    #[test]
    fn two_modes_two_targets() {
        let g = augment(
            &chain(4),
            &[direct("e2", "drop", "n1"), direct("e2", "slip", "n1")],
        )
        .unwrap();
        assert_eq!(g.recovery_target("e2", "drop").unwrap(), "rec:e2:drop");
        assert_eq!(g.recovery_target("e2", "slip").unwrap(), "rec:e2:slip");
    }

    #[test]
    fn augment_errors() {
        assert!(matches!(
            augment(&chain(3), &[direct("nope", "drop", "n1")]),
            Err(GraphError::UnknownNominalEdge(_))
        ));
        assert!(matches!(
            augment(&chain(3), &[direct("e1", "drop", "zz")]),
            Err(GraphError::MergeTargetMissing { .. })
        ));
    }

    #[test]
    fn augment_is_idempotent() {
        let spec = [direct("e2", "drop", "n1")];
        let once = augment(&chain(4), &spec).unwrap();
        let twice = augment(&once, &spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn filter_removes_regressive_branch() {
        // failure context n2 (dist 2 in a 5-chain); merge to start (dist 4)
        let mut r = direct("e3", "drop", "n0");
        r.recovery_node = Some(RecoveryNodeDoc {
            id: "r".into(),
            sub_goals: vec![],
            gripper_intent: BTreeMap::new(),
        });
        r.weights.insert("n0".into(), 0.0);
        let g = augment(&chain(5), &[r]).unwrap();
        let (f, report) = filter_forward_moving(&g);
        assert_eq!(f.recovery_nodes().count(), 0);
        assert!(f.edge("e3").unwrap().failure_modes.is_empty());
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].dist_recovery, Some(4.0));
        assert_eq!(report.rejected[0].dist_failure, Some(2.0));
    }

    #[test]
    fn filter_keeps_equal_cost_branch() {
        let mut r = direct("e3", "drop", "n3");
        r.recovery_node = Some(RecoveryNodeDoc {
            id: "r".into(),
            sub_goals: vec![],
            gripper_intent: BTreeMap::new(),
        });
        // dist(r) = 1 + dist(n3) = 2 = dist(n2)
        r.weights.insert("n3".into(), 1.0);
        let g = augment(&chain(5), &[r]).unwrap();
        let (f, report) = filter_forward_moving(&g);
        assert_eq!(f.recovery_nodes().count(), 1);
        assert!(report.rejected.is_empty());
        assert_eq!(filter_forward_moving(&chain(5)).0, chain(5));
    }

    #[test]
    fn serialization_round_trip() {
        let g = augment(&chain(4), &[direct("e2", "drop", "n1")]).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: TaskGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
