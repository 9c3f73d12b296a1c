//! Node-graph data model, structural validation and structural edits.
//!
//! Node ids are dense (`nodes[i].id == i`) and are reassigned by every edit
//! that removes or reorders nodes. All set iterations run in ascending id
//! order so that every derived sequence is reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{OpLibrary, ParamValue, Role};

pub const GRAPH_FORMAT: &str = "matforge-graph/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: usize,
    pub type_id: usize,
    pub params: Vec<ParamValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Output,
    Input,
}

/// A connection point on a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotRef {
    pub node: usize,
    pub kind: SlotKind,
    pub index: usize,
}

/// One end of an edge, serialized as `[node, slot]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Endpoint {
    pub node: usize,
    pub slot: usize,
}

impl From<(usize, usize)> for Endpoint {
    fn from((node, slot): (usize, usize)) -> Self {
        Endpoint { node, slot }
    }
}

impl From<Endpoint> for (usize, usize) {
    fn from(e: Endpoint) -> Self {
        (e.node, e.slot)
    }
}

/// Connects output slot `from` of one node to input slot `to` of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: Endpoint,
    pub to: Endpoint,
}

impl Edge {
    pub fn new(src: usize, src_slot: usize, dst: usize, dst_slot: usize) -> Self {
        Edge {
            from: Endpoint {
                node: src,
                slot: src_slot,
            },
            to: Endpoint {
                node: dst,
                slot: dst_slot,
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub outputs: BTreeMap<Role, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub message: String,
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    pub fn into_result(self) -> Result<()> {
        if self.ok {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.rule, v.message))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidGraph(msg))
    }
}

impl NodeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node with the given parameters and returns its id. Output
    /// nodes claim their role if it is still free.
    pub fn add_node(&mut self, lib: &OpLibrary, type_id: usize, params: Vec<ParamValue>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            type_id,
            params,
        });
        if let Some(role) = lib.get(type_id).and_then(|op| op.output_role()) {
            self.outputs.entry(role).or_insert(id);
        }
        id
    }

    /// Appends a node of type `name` with default parameters.
    pub fn add(&mut self, lib: &OpLibrary, name: &str) -> usize {
        let op = lib.by_name(name).unwrap_or_else(|| panic!("unknown op {name}"));
        self.add_node(lib, op.type_id, op.default_params())
    }

    pub fn connect(&mut self, src: usize, src_slot: usize, dst: usize, dst_slot: usize) {
        self.edges.push(Edge::new(src, src_slot, dst, dst_slot));
    }

    pub fn slot_count(&self, lib: &OpLibrary) -> usize {
        self.nodes
            .iter()
            .map(|n| lib.get(n.type_id).map_or(0, |op| op.slot_count()))
            .sum()
    }

    /// Source endpoint feeding each connected input slot.
    pub fn input_sources(&self) -> HashMap<(usize, usize), Endpoint> {
        self.edges
            .iter()
            .map(|e| ((e.to.node, e.to.slot), e.from))
            .collect()
    }

    /// Upstream neighbours per node, ascending and deduplicated.
    pub fn predecessors(&self) -> Vec<BTreeSet<usize>> {
        let mut preds = vec![BTreeSet::new(); self.nodes.len()];
        for e in &self.edges {
            if e.to.node < preds.len() {
                preds[e.to.node].insert(e.from.node);
            }
        }
        preds
    }

    /// Keeps the nodes in `keep`, relabels them densely in their current
    /// order, and drops edges and output entries that touch removed nodes.
    pub fn retain(&self, keep: &BTreeSet<usize>) -> NodeGraph {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::with_capacity(keep.len());
        for node in &self.nodes {
            if keep.contains(&node.id) {
                remap[node.id] = nodes.len();
                nodes.push(Node {
                    id: nodes.len(),
                    ..node.clone()
                });
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| keep.contains(&e.from.node) && keep.contains(&e.to.node))
            .map(|e| Edge::new(remap[e.from.node], e.from.slot, remap[e.to.node], e.to.slot))
            .collect();
        let outputs = self
            .outputs
            .iter()
            .filter(|(_, id)| keep.contains(id))
            .map(|(role, id)| (*role, remap[*id]))
            .collect();
        NodeGraph {
            nodes,
            edges,
            outputs,
        }
    }

    /// Reorders nodes so that new id `k` is old node `order[k]`. Edge order is preserved.
    pub fn permute(&self, order: &[usize]) -> NodeGraph {
        assert_eq!(order.len(), self.nodes.len(), "order must be a permutation");
        let mut remap = vec![usize::MAX; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = order
            .iter()
            .enumerate()
            .map(|(new, &old)| Node {
                id: new,
                ..self.nodes[old].clone()
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge::new(remap[e.from.node], e.from.slot, remap[e.to.node], e.to.slot))
            .collect();
        let outputs = self
            .outputs
            .iter()
            .map(|(role, id)| (*role, remap[*id]))
            .collect();
        NodeGraph {
            nodes,
            edges,
            outputs,
        }
    }

    pub fn to_json(&self, lib: &OpLibrary) -> String {
        let file = GraphFile {
            format: GRAPH_FORMAT.to_string(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    op: lib
                        .get(n.type_id)
                        .map_or_else(|| format!("#{}", n.type_id), |op| op.name.to_string()),
                    params: n.params.clone(),
                })
                .collect(),
            edges: self.edges.clone(),
            outputs: self.outputs.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str, lib: &OpLibrary) -> Result<NodeGraph> {
        let file: GraphFile = serde_json::from_str(text)?;
        if file.format != GRAPH_FORMAT {
            return Err(Error::InvalidGraph(format!(
                "unsupported format `{}`",
                file.format
            )));
        }
        let nodes = file
            .nodes
            .into_iter()
            .map(|n| {
                let op = lib.by_name(&n.op).ok_or_else(|| Error::UnknownOp(n.op.clone()))?;
                Ok(Node {
                    id: n.id,
                    type_id: op.type_id,
                    params: n.params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NodeGraph {
            nodes,
            edges: file.edges,
            outputs: file.outputs,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(rename = "type")]
    op: String,
    params: Vec<ParamValue>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    nodes: Vec<NodeRecord>,
    edges: Vec<Edge>,
    outputs: BTreeMap<Role, usize>,
}

/// Checks every structural invariant and schema conformity. Never fails;
/// problems are collected into the report.
pub fn validate_graph(g: &NodeGraph, lib: &OpLibrary) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |rule, message: String, nodes: Vec<usize>, edges: Vec<usize>| {
        violations.push(Violation {
            rule,
            message,
            nodes,
            edges,
        })
    };

    for (i, node) in g.nodes.iter().enumerate() {
        if node.id != i {
            push(
                "node-id",
                format!("node at position {i} has id {}", node.id),
                vec![i],
                vec![],
            );
        }
        let Some(op) = lib.get(node.type_id) else {
            push(
                "unknown-type",
                format!("node {i} has unknown type {}", node.type_id),
                vec![i],
                vec![],
            );
            continue;
        };
        if node.params.len() != op.params.len() {
            push(
                "param-schema",
                format!(
                    "node {i} ({}) has {} params, schema declares {}",
                    op.name,
                    node.params.len(),
                    op.params.len()
                ),
                vec![i],
                vec![],
            );
            continue;
        }
        for (schema, value) in op.params.iter().zip(&node.params) {
            if let Err(msg) = schema.check(value) {
                push("param-schema", format!("node {i} ({}): {msg}", op.name), vec![i], vec![]);
            }
        }
    }

    let n = g.nodes.len();
    let mut structurally_ok = vec![false; g.edges.len()];
    let mut occupied: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (ei, e) in g.edges.iter().enumerate() {
        let (Some(src), Some(dst)) = (g.nodes.get(e.from.node), g.nodes.get(e.to.node)) else {
            push(
                "edge-endpoint",
                format!("edge {ei} references a missing node"),
                vec![],
                vec![ei],
            );
            continue;
        };
        let (Some(src_op), Some(dst_op)) = (lib.get(src.type_id), lib.get(dst.type_id)) else {
            continue;
        };
        if e.from.slot >= src_op.n_outputs || e.to.slot >= dst_op.n_inputs {
            push(
                "edge-slot",
                format!(
                    "edge {ei} uses output {} of {} and input {} of {}",
                    e.from.slot, src_op.name, e.to.slot, dst_op.name
                ),
                vec![e.from.node, e.to.node],
                vec![ei],
            );
            continue;
        }
        if e.from.node == e.to.node {
            push(
                "self-loop",
                format!("edge {ei} connects node {} to itself", e.from.node),
                vec![e.from.node],
                vec![ei],
            );
            continue;
        }
        structurally_ok[ei] = true;
        if let Some(prev) = occupied.insert((e.to.node, e.to.slot), ei) {
            push(
                "multi-input-slot",
                format!(
                    "input slot {} of node {} receives edges {prev} and {ei}",
                    e.to.slot, e.to.node
                ),
                vec![e.to.node],
                vec![prev, ei],
            );
        }
    }

    let mut succ = vec![Vec::new(); n];
    for (ei, e) in g.edges.iter().enumerate() {
        if structurally_ok[ei] {
            succ[e.from.node].push(e.to.node);
        }
    }
    if let Some(cycle) = find_cycle(&succ) {
        push(
            "cycle",
            format!("cycle through nodes {cycle:?}"),
            cycle,
            vec![],
        );
    }

    for (role, &id) in &g.outputs {
        let matches = g
            .nodes
            .get(id)
            .and_then(|node| lib.get(node.type_id))
            .and_then(|op| op.output_role())
            == Some(*role);
        if !matches {
            push(
                "output-role",
                format!("outputs.{role} references node {id}, which is not an output_{role} node"),
                vec![id],
                vec![],
            );
        }
    }
    let mut by_role: BTreeMap<Role, Vec<usize>> = BTreeMap::new();
    for node in &g.nodes {
        if let Some(role) = lib.get(node.type_id).and_then(|op| op.output_role()) {
            by_role.entry(role).or_default().push(node.id);
        }
    }
    for (role, ids) in by_role {
        if ids.len() > 1 {
            push(
                "duplicate-output-role",
                format!("{} nodes claim role {role}", ids.len()),
                ids,
                vec![],
            );
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// Returns the nodes of one directed cycle, if any.
fn find_cycle(succ: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = succ.len();
    let mut mark = vec![Mark::New; n];
    let mut parent = vec![usize::MAX; n];
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < succ[v].len() {
                let w = succ[v][*next];
                *next += 1;
                match mark[w] {
                    Mark::New => {
                        mark[w] = Mark::Active;
                        parent[w] = v;
                        stack.push((w, 0));
                    }
                    Mark::Active => {
                        let mut cycle = vec![w];
                        let mut cur = v;
                        while cur != w {
                            cycle.push(cur);
                            cur = parent[cur];
                        }
                        cycle.sort_unstable();
                        return Some(cycle);
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

/// Kahn's algorithm with ties broken by ascending node id.
pub fn topological_order(g: &NodeGraph) -> Result<Vec<usize>> {
    let n = g.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for e in &g.edges {
        if e.from.node < n && e.to.node < n {
            indegree[e.to.node] += 1;
            succ[e.from.node].push(e.to.node);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &succ[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if order.len() < n {
        let node = (0..n).find(|&v| indegree[v] > 0).unwrap_or(0);
        return Err(Error::CycleDetected { node });
    }
    Ok(order)
}

/// Nodes with a directed path to any node listed in `g.outputs`, the
/// output nodes included.
pub fn reachable_to_outputs(g: &NodeGraph) -> BTreeSet<usize> {
    let preds = g.predecessors();
    let mut seen: BTreeSet<usize> = g
        .outputs
        .values()
        .copied()
        .filter(|&id| id < g.nodes.len())
        .collect();
    let mut queue: VecDeque<usize> = seen.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        for &p in &preds[v] {
            if seen.insert(p) {
                queue.push_back(p);
            }
        }
    }
    seen
}

/// Drops every node that does not contribute to an output.
pub fn remove_unconnected_nodes(g: &NodeGraph) -> NodeGraph {
    g.retain(&reachable_to_outputs(g))
}
