//! Linearization of node graphs into node, edge and parameter token
//! sequences, and the inverse.
//!
//! * Node sequence: `[START, type ids in node order..., END]`.
//! * Slot list: for every node in node order, its output slots then its
//!   input slots, in schema order.
//! * Edge sequence: `[START, out-ptr, in-ptr, ..., END]`, pairs sorted by the
//!   position of their input slot in the slot list.
//! * Parameter sequence: `[START, MARK, bins of node 0..., MARK, bins of
//!   node 1..., END]`, one MARK per node even when it has no parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeGraph, SlotKind, SlotRef};
use crate::ops::{OpLibrary, ParamKind, ParamSchema, ParamValue, Role};

pub const MAX_NODES: usize = 80;
pub const MAX_EDGES: usize = 200;
pub const MAX_SLOTS: usize = 210;
pub const BINS: usize = 128;

pub const EDGE_START: usize = MAX_SLOTS;
pub const EDGE_END: usize = MAX_SLOTS + 1;

pub const PARAM_START: usize = BINS;
pub const PARAM_END: usize = BINS + 1;
pub const NODE_MARK: usize = BINS + 2;
pub const PARAM_VOCAB: usize = BINS + 3;

pub fn node_start(lib: &OpLibrary) -> usize {
    lib.len()
}

pub fn node_end(lib: &OpLibrary) -> usize {
    lib.len() + 1
}

pub fn node_vocab(lib: &OpLibrary) -> usize {
    lib.len() + 2
}

/// Longest possible parameter sequence under the node cap.
pub fn max_param_len(lib: &OpLibrary) -> usize {
    2 + MAX_NODES * (1 + lib.max_scalars())
}

pub const MAX_NODE_LEN: usize = MAX_NODES + 2;
pub const MAX_EDGE_LEN: usize = 2 * MAX_EDGES + 2;

/// Traversal used to order nodes in every sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrder {
    /// Breadth-first from the outputs towards the generators.
    #[default]
    BackToFront,
    /// The reverse of [`NodeOrder::BackToFront`]; used for autocompletion.
    FrontToBack,
}

/// Maps `v` in `[lo, hi]` to one of `bins` levels, rounding half away from zero.
pub fn quantize_value(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (v - lo) / (hi - lo) * (bins - 1) as f64;
    (t.round().max(0.0) as usize).min(bins - 1)
}

pub fn dequantize_value(bin: usize, lo: f64, hi: f64, bins: usize) -> f64 {
    lo + bin as f64 / (bins - 1) as f64 * (hi - lo)
}

/// Quantizes one scalar of a parameter into `[0, 127]`.
pub fn quantize(v: f64, schema: &ParamSchema) -> Result<usize> {
    quantize_bins(v, schema, BINS)
}

pub fn quantize_bins(v: f64, schema: &ParamSchema, bins: usize) -> Result<usize> {
    if !(v >= schema.lo && v <= schema.hi) {
        return Err(Error::OutOfRange {
            param: schema.name.to_string(),
            value: v,
            lo: schema.lo,
            hi: schema.hi,
        });
    }
    Ok(quantize_value(v, schema.lo, schema.hi, bins))
}

/// Inverse of [`quantize`]; discrete kinds snap to the nearest integer.
pub fn dequantize(bin: usize, schema: &ParamSchema) -> f64 {
    dequantize_bins(bin, schema, BINS)
}

pub fn dequantize_bins(bin: usize, schema: &ParamSchema, bins: usize) -> f64 {
    let v = dequantize_value(bin, schema.lo, schema.hi, bins);
    if schema.kind.is_discrete() {
        v.round().clamp(schema.lo, schema.hi)
    } else {
        v
    }
}

/// Snaps every parameter of `g` to the centre of its quantization bin.
pub fn quantize_graph(g: &NodeGraph, lib: &OpLibrary, bins: usize) -> NodeGraph {
    let mut out = g.clone();
    for node in &mut out.nodes {
        let op = lib.schema(node.type_id);
        for (schema, value) in op.params.iter().zip(&mut node.params) {
            for s in value.scalars_mut() {
                let bin = quantize_value(s.clamp(schema.lo, schema.hi), schema.lo, schema.hi, bins);
                *s = dequantize_bins(bin, schema, bins);
            }
        }
    }
    out
}

/// Back-to-front breadth-first node order. Starts at the listed output nodes
/// in role order; each subsequent frontier holds the undiscovered sources of
/// the current one, sorted by (input slot index through which they were
/// first reached, node id). Nodes that never get reached follow in id order.
pub fn node_order_pi_r(g: &NodeGraph) -> Vec<usize> {
    let n = g.nodes.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut frontier: Vec<usize> = Role::ALL
        .iter()
        .filter_map(|r| g.outputs.get(r).copied())
        .filter(|&id| id < n)
        .collect();
    for &id in &frontier {
        visited[id] = true;
    }
    order.extend(&frontier);
    while !frontier.is_empty() {
        let in_frontier: BTreeSet<usize> = frontier.iter().copied().collect();
        let mut found: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &g.edges {
            if in_frontier.contains(&e.to.node) && e.from.node < n && !visited[e.from.node] {
                let slot = found.entry(e.from.node).or_insert(e.to.slot);
                *slot = (*slot).min(e.to.slot);
            }
        }
        let mut next: Vec<(usize, usize)> = found.into_iter().map(|(id, slot)| (slot, id)).collect();
        next.sort_unstable();
        frontier = next.into_iter().map(|(_, id)| id).collect();
        for &id in &frontier {
            visited[id] = true;
        }
        order.extend(&frontier);
    }
    order.extend((0..n).filter(|&id| !visited[id]));
    order
}

pub fn node_order(g: &NodeGraph, order: NodeOrder) -> Vec<usize> {
    let mut pi = node_order_pi_r(g);
    if order == NodeOrder::FrontToBack {
        pi.reverse();
    }
    pi
}

/// Slot list for a sequence of node types. `SlotRef::node` is the node's
/// ordinal in the sequence.
pub fn slot_list(types: &[usize], lib: &OpLibrary) -> Vec<SlotRef> {
    let mut slots = Vec::new();
    for (ordinal, &t) in types.iter().enumerate() {
        let op = lib.schema(t);
        for index in 0..op.n_outputs {
            slots.push(SlotRef {
                node: ordinal,
                kind: SlotKind::Output,
                index,
            });
        }
        for index in 0..op.n_inputs {
            slots.push(SlotRef {
                node: ordinal,
                kind: SlotKind::Input,
                index,
            });
        }
    }
    slots
}

/// Position of each node's first output slot and first input slot.
fn slot_offsets(types: &[usize], lib: &OpLibrary) -> Vec<(usize, usize)> {
    let mut offset = 0;
    types
        .iter()
        .map(|&t| {
            let op = lib.schema(t);
            let out = offset;
            let inp = offset + op.n_outputs;
            offset += op.slot_count();
            (out, inp)
        })
        .collect()
}

/// Relabels nodes in the given traversal order and sorts edges by the
/// slot-list position of their input slot.
pub fn canonicalize(g: &NodeGraph, lib: &OpLibrary, order: NodeOrder) -> NodeGraph {
    let mut c = g.permute(&node_order(g, order));
    let types: Vec<usize> = c.nodes.iter().map(|n| n.type_id).collect();
    let offsets = slot_offsets(&types, lib);
    c.edges.sort_by_key(|e| offsets[e.to.node].1 + e.to.slot);
    c
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAux {
    pub position: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeAux {
    pub position: Vec<usize>,
    /// 0 output slot, 1 input slot, 2 START, 3 END.
    pub slot_kind: Vec<usize>,
    /// Type id of the owning node; the library size for special tokens.
    pub owner_type: Vec<usize>,
    /// Ordinal of the owning node; `MAX_NODES` for special tokens.
    pub owner_ordinal: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAux {
    pub position: Vec<usize>,
    /// Ordinal of the node a token belongs to; `MAX_NODES` for START/END.
    pub node_ordinal: Vec<usize>,
    /// Index of the parameter within its node; the library's max param
    /// count for structural tokens.
    pub param_index: Vec<usize>,
    pub element_index: Vec<usize>,
    /// [`ParamKind::id`] for bins; 4 MARK, 5 START, 6 END.
    pub kind: Vec<usize>,
}

pub const KIND_MARK: usize = 4;
pub const KIND_START: usize = 5;
pub const KIND_END: usize = 6;
pub const KIND_COUNT: usize = 7;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSequences {
    pub node: NodeAux,
    pub edge: EdgeAux,
    pub param: ParamAux,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedGraph {
    pub node_seq: Vec<usize>,
    #[serde(default)]
    pub slot_list: Vec<SlotRef>,
    pub edge_seq: Vec<usize>,
    pub param_seq: Vec<usize>,
    #[serde(default)]
    pub aux: AuxSequences,
}

impl TokenizedGraph {
    /// Node types of the interior of the node sequence.
    pub fn node_types(&self) -> &[usize] {
        let end = self.node_seq.len().saturating_sub(1).max(1);
        &self.node_seq[1.min(end)..end]
    }
}

/// Per-token schema lookup for a parameter sequence implied by `types`:
/// `(node ordinal, param index, element index, kind id)` per token.
pub fn param_layout(types: &[usize], lib: &OpLibrary) -> Vec<(usize, usize, usize, usize)> {
    let special = lib.max_params();
    let mut layout = vec![(MAX_NODES, special, 0, KIND_START)];
    for (ordinal, &t) in types.iter().enumerate() {
        layout.push((ordinal, special, 0, KIND_MARK));
        for (pi, p) in lib.schema(t).params.iter().enumerate() {
            for e in 0..p.scalar_count() {
                layout.push((ordinal, pi, e, p.kind.id()));
            }
        }
    }
    layout.push((MAX_NODES, special, 0, KIND_END));
    layout
}

pub fn compute_aux(
    node_seq: &[usize],
    edge_seq: &[usize],
    slots: &[SlotRef],
    types: &[usize],
    lib: &OpLibrary,
) -> AuxSequences {
    let node = NodeAux {
        position: (0..node_seq.len()).collect(),
    };
    let mut edge = EdgeAux::default();
    for (pos, &tok) in edge_seq.iter().enumerate() {
        edge.position.push(pos);
        match slots.get(tok) {
            Some(slot) if tok < EDGE_START => {
                edge.slot_kind.push(match slot.kind {
                    SlotKind::Output => 0,
                    SlotKind::Input => 1,
                });
                edge.owner_type.push(types[slot.node]);
                edge.owner_ordinal.push(slot.node);
            }
            _ => {
                edge.slot_kind.push(if tok == EDGE_END { 3 } else { 2 });
                edge.owner_type.push(lib.len());
                edge.owner_ordinal.push(MAX_NODES);
            }
        }
    }
    let mut param = ParamAux::default();
    for (pos, (ordinal, pi, e, kind)) in param_layout(types, lib).into_iter().enumerate() {
        param.position.push(pos);
        param.node_ordinal.push(ordinal);
        param.param_index.push(pi);
        param.element_index.push(e);
        param.kind.push(kind);
    }
    AuxSequences { node, edge, param }
}

pub fn check_size_caps(g: &NodeGraph, lib: &OpLibrary) -> Result<()> {
    let slots = g.slot_count(lib);
    if g.nodes.len() > MAX_NODES || g.edges.len() > MAX_EDGES || slots > MAX_SLOTS {
        return Err(Error::SizeCapExceeded(format!(
            "{} nodes (max {MAX_NODES}), {} edges (max {MAX_EDGES}), {slots} slots (max {MAX_SLOTS})",
            g.nodes.len(),
            g.edges.len()
        )));
    }
    Ok(())
}

/// Encodes a valid graph in back-to-front order.
pub fn encode(g: &NodeGraph, lib: &OpLibrary) -> Result<TokenizedGraph> {
    encode_with(g, lib, NodeOrder::BackToFront)
}

pub fn encode_with(g: &NodeGraph, lib: &OpLibrary, order: NodeOrder) -> Result<TokenizedGraph> {
    check_size_caps(g, lib)?;
    let c = canonicalize(g, lib, order);
    let types: Vec<usize> = c.nodes.iter().map(|n| n.type_id).collect();

    let mut node_seq = Vec::with_capacity(types.len() + 2);
    node_seq.push(node_start(lib));
    node_seq.extend(&types);
    node_seq.push(node_end(lib));

    let slots = slot_list(&types, lib);
    let offsets = slot_offsets(&types, lib);
    let mut edge_seq = vec![EDGE_START];
    for e in &c.edges {
        edge_seq.push(offsets[e.from.node].0 + e.from.slot);
        edge_seq.push(offsets[e.to.node].1 + e.to.slot);
    }
    edge_seq.push(EDGE_END);

    let mut param_seq = vec![PARAM_START];
    for node in &c.nodes {
        param_seq.push(NODE_MARK);
        let op = lib.schema(node.type_id);
        for (schema, value) in op.params.iter().zip(&node.params) {
            for &s in value.scalars() {
                param_seq.push(quantize(s, schema)?);
            }
        }
    }
    param_seq.push(PARAM_END);

    let aux = compute_aux(&node_seq, &edge_seq, &slots, &types, lib);
    Ok(TokenizedGraph {
        node_seq,
        slot_list: slots,
        edge_seq,
        param_seq,
        aux,
    })
}

fn malformed(stream: &'static str, offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedSequence {
        stream,
        offset,
        reason: reason.into(),
    }
}

/// Validates the node sequence framing and returns its interior types.
pub fn parse_node_seq(node_seq: &[usize], lib: &OpLibrary) -> Result<Vec<usize>> {
    if node_seq.first() != Some(&node_start(lib)) {
        return Err(malformed("node", 0, "missing START"));
    }
    if node_seq.len() < 2 || node_seq.last() != Some(&node_end(lib)) {
        return Err(malformed("node", node_seq.len(), "missing END"));
    }
    let interior = &node_seq[1..node_seq.len() - 1];
    for (i, &t) in interior.iter().enumerate() {
        if t >= lib.len() {
            return Err(malformed("node", i + 1, format!("token {t} is not an operation type")));
        }
    }
    Ok(interior.to_vec())
}

/// Rebuilds a graph from token sequences. The decoded node ids follow the
/// node sequence; output nodes claim their roles.
pub fn decode(t: &TokenizedGraph, lib: &OpLibrary) -> Result<NodeGraph> {
    decode_sequences(&t.node_seq, &t.edge_seq, &t.param_seq, lib)
}

pub fn decode_sequences(
    node_seq: &[usize],
    edge_seq: &[usize],
    param_seq: &[usize],
    lib: &OpLibrary,
) -> Result<NodeGraph> {
    let types = parse_node_seq(node_seq, lib)?;
    let slots = slot_list(&types, lib);

    let mut g = NodeGraph::new();
    let mut seen_roles = BTreeMap::new();
    for (ordinal, &t) in types.iter().enumerate() {
        if let Some(role) = lib.schema(t).output_role() {
            if seen_roles.insert(role, ordinal).is_some() {
                return Err(malformed("node", ordinal + 1, format!("second output node for {role}")));
            }
        }
    }

    let mut cursor = 1;
    let mut params_per_node = Vec::with_capacity(types.len());
    if param_seq.first() != Some(&PARAM_START) {
        return Err(malformed("param", 0, "missing START"));
    }
    for &t in &types {
        if param_seq.get(cursor) != Some(&NODE_MARK) {
            return Err(malformed("param", cursor, "expected node mark"));
        }
        cursor += 1;
        let mut values = Vec::new();
        for schema in &lib.schema(t).params {
            let mut scalars = Vec::with_capacity(schema.scalar_count());
            for _ in 0..schema.scalar_count() {
                match param_seq.get(cursor) {
                    Some(&bin) if bin < BINS => scalars.push(dequantize(bin, schema)),
                    Some(&tok) => {
                        return Err(malformed("param", cursor, format!("expected a bin, found {tok}")))
                    }
                    None => return Err(malformed("param", cursor, "sequence ends early")),
                }
                cursor += 1;
            }
            values.push(match schema.kind {
                ParamKind::FloatVec(_) => ParamValue::Vector(scalars),
                _ => ParamValue::Scalar(scalars[0]),
            });
        }
        params_per_node.push(values);
    }
    if param_seq.get(cursor) != Some(&PARAM_END) {
        return Err(malformed("param", cursor, "missing END"));
    }
    if cursor + 1 != param_seq.len() {
        return Err(malformed("param", cursor + 1, "tokens after END"));
    }

    for (&t, params) in types.iter().zip(params_per_node) {
        g.add_node(lib, t, params);
    }

    if edge_seq.first() != Some(&EDGE_START) {
        return Err(malformed("edge", 0, "missing START"));
    }
    if edge_seq.len() < 2 || edge_seq.last() != Some(&EDGE_END) {
        return Err(malformed("edge", edge_seq.len(), "missing END"));
    }
    let interior = &edge_seq[1..edge_seq.len() - 1];
    if interior.len() % 2 != 0 {
        return Err(malformed("edge", edge_seq.len() - 1, "odd number of pointers"));
    }
    let mut occupied = BTreeSet::new();
    for (pair, chunk) in interior.chunks_exact(2).enumerate() {
        let offset = 1 + 2 * pair;
        for (k, &p) in chunk.iter().enumerate() {
            if p >= slots.len() {
                return Err(if p >= EDGE_START {
                    malformed("edge", offset + k, format!("special token {p} inside sequence"))
                } else {
                    Error::PointerOutOfRange {
                        pointer: p,
                        offset: offset + k,
                        len: slots.len(),
                    }
                });
            }
        }
        let (src, dst) = (slots[chunk[0]], slots[chunk[1]]);
        if src.kind != SlotKind::Output {
            return Err(malformed("edge", offset, "expected an output slot"));
        }
        if dst.kind != SlotKind::Input {
            return Err(malformed("edge", offset + 1, "expected an input slot"));
        }
        if src.node == dst.node {
            return Err(malformed("edge", offset, "edge connects a node to itself"));
        }
        if !occupied.insert((dst.node, dst.index)) {
            return Err(malformed(
                "edge",
                offset + 1,
                format!("input slot {} of node {} already connected", dst.index, dst.node),
            ));
        }
        g.connect(src.node, src.index, dst.node, dst.index);
    }
    if let Err(Error::CycleDetected { node }) = crate::graph::topological_order(&g) {
        return Err(Error::CycleIntroduced { node });
    }
    Ok(g)
}

/// One training sample as stored in a shard file (one JSON object per line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub graph_id: usize,
    pub variant_id: usize,
    pub node_seq: Vec<usize>,
    pub edge_seq: Vec<usize>,
    pub param_seq: Vec<usize>,
    pub aux: AuxSequences,
    pub cond: Vec<f32>,
    pub render: String,
}

impl ShardRecord {
    pub fn tokens(&self, lib: &OpLibrary) -> Result<TokenizedGraph> {
        let types = parse_node_seq(&self.node_seq, lib)?;
        Ok(TokenizedGraph {
            node_seq: self.node_seq.clone(),
            slot_list: slot_list(&types, lib),
            edge_seq: self.edge_seq.clone(),
            param_seq: self.param_seq.clone(),
            aux: self.aux.clone(),
        })
    }
}
