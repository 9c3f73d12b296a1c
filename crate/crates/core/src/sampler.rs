//! Validity-masked sampling of complete graphs and autocompletion of
//! partial ones.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::rng_for;
use crate::error::{Error, Result};
use crate::graph::{remove_unconnected_nodes, validate_graph, NodeGraph, SlotKind, SlotRef};
use crate::model::ModelStack;
use crate::nn::{masked_softmax, Mat};
use crate::ops::{OpLibrary, Role};
use crate::tokenizer::{
    decode_sequences, encode_with, node_end, node_start, node_vocab, slot_list, BINS, EDGE_END, EDGE_START,
    MAX_EDGES, MAX_NODES, MAX_SLOTS, PARAM_START,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    /// Always take the most probable admissible token.
    pub greedy: bool,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_p: 0.9,
            temperature: 1.0,
            greedy: false,
            candidates: 30,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Keeps the smallest probability-descending prefix (ties by token id)
/// whose mass reaches `top_p`, then renormalizes. Zero-probability tokens
/// are never kept.
pub fn nucleus_filter(dist: &[f64], top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; dist.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = dist[i];
        mass += dist[i];
        if mass >= top_p {
            break;
        }
    }
    out.iter_mut().for_each(|p| *p /= mass);
    out
}

/// Partial token streams during decoding with the bookkeeping needed by
/// the validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub types: Vec<usize>,
    pub nodes_done: bool,
    pub slots: Vec<SlotRef>,
    pub occupied: Vec<bool>,
    /// Output slot awaiting its input partner.
    pub pending: Option<usize>,
    pub edges: Vec<(usize, usize)>,
    pub edge_tokens: Vec<usize>,
    pub edges_done: bool,
    pub slot_total: usize,
    pub input_total: usize,
    pub roles: BTreeSet<Role>,
    pub generators: usize,
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::new()
    }
}

struct Cheapest {
    output: (usize, usize),
    generator: (usize, usize),
}

fn cheapest(lib: &OpLibrary) -> Cheapest {
    let pick = |pred: &dyn Fn(&crate::ops::OpSchema) -> bool| {
        lib.iter()
            .filter(|op| pred(op))
            .map(|op| (op.slot_count(), op.n_inputs))
            .min()
            .expect("library has outputs and generators")
    };
    Cheapest {
        output: pick(&|op| op.is_output()),
        generator: pick(&|op| op.is_generator()),
    }
}

impl DecodeState {
    pub fn new() -> Self {
        DecodeState {
            types: Vec::new(),
            nodes_done: false,
            slots: Vec::new(),
            occupied: Vec::new(),
            pending: None,
            edges: Vec::new(),
            edge_tokens: Vec::new(),
            edges_done: false,
            slot_total: 0,
            input_total: 0,
            roles: BTreeSet::new(),
            generators: 0,
        }
    }

    /// Whether the prefix, extended by `add`, still admits the cheapest
    /// completion within the size caps.
    fn fits(&self, lib: &OpLibrary, add: Option<usize>) -> bool {
        let c = cheapest(lib);
        let (mut n, mut s, mut i) = (self.types.len(), self.slot_total, self.input_total);
        let mut has_output = !self.roles.is_empty();
        let mut has_gen = self.generators > 0;
        if let Some(t) = add {
            let op = lib.schema(t);
            n += 1;
            s += op.slot_count();
            i += op.n_inputs;
            has_output |= op.is_output();
            has_gen |= op.is_generator();
        }
        for (needed, (slots, inputs)) in [(!has_output, c.output), (!has_gen, c.generator)] {
            if needed {
                n += 1;
                s += slots;
                i += inputs;
            }
        }
        n <= MAX_NODES && s <= MAX_SLOTS && i <= MAX_EDGES
    }

    pub fn push_node(&mut self, tok: usize, lib: &OpLibrary) -> Result<()> {
        let mask = valid_node_mask(self, lib);
        if self.nodes_done || !mask.get(tok).copied().unwrap_or(false) {
            return Err(Error::MalformedSequence {
                stream: "node",
                offset: self.types.len() + 1,
                reason: format!("token {tok} is not admissible here"),
            });
        }
        if tok == node_end(lib) {
            self.nodes_done = true;
            self.slots = slot_list(&self.types, lib);
            self.occupied = vec![false; self.slots.len()];
            return Ok(());
        }
        let op = lib.schema(tok);
        self.types.push(tok);
        self.slot_total += op.slot_count();
        self.input_total += op.n_inputs;
        if let Some(r) = op.output_role() {
            self.roles.insert(r);
        }
        if op.is_generator() {
            self.generators += 1;
        }
        Ok(())
    }

    /// `reach[u][v]`: a directed path leads from node `u` to node `v`.
    fn closure(&self) -> Vec<Vec<bool>> {
        let n = self.types.len();
        let mut succ = vec![Vec::new(); n];
        for &(u, v) in &self.edges {
            succ[u].push(v);
        }
        (0..n)
            .map(|root| {
                let mut seen = vec![false; n];
                let mut stack = vec![root];
                seen[root] = true;
                while let Some(u) = stack.pop() {
                    for &v in &succ[u] {
                        if !seen[v] {
                            seen[v] = true;
                            stack.push(v);
                        }
                    }
                }
                seen
            })
            .collect()
    }

    fn can_connect(&self, reach: &[Vec<bool>], out_slot: usize, in_slot: usize) -> bool {
        let (src, dst) = (self.slots[out_slot], self.slots[in_slot]);
        dst.kind == SlotKind::Input
            && !self.occupied[in_slot]
            && src.node != dst.node
            && !reach[dst.node][src.node]
    }

    /// True while some node feeding an output has an unconnected input.
    pub fn has_open_inputs(&self, lib: &OpLibrary) -> bool {
        let reach = self.closure();
        let outputs: Vec<usize> = (0..self.types.len())
            .filter(|&i| lib.schema(self.types[i]).is_output())
            .collect();
        self.slots.iter().enumerate().any(|(i, s)| {
            s.kind == SlotKind::Input && !self.occupied[i] && outputs.iter().any(|&o| reach[s.node][o])
        })
    }

    pub fn push_edge(&mut self, tok: usize, lib: &OpLibrary) -> Result<()> {
        let mask = valid_slot_mask(self, lib);
        let idx = if tok == EDGE_END { self.slots.len() } else { tok };
        if !self.nodes_done || self.edges_done || !mask.get(idx).copied().unwrap_or(false) {
            return Err(Error::MalformedSequence {
                stream: "edge",
                offset: self.edge_tokens.len() + 1,
                reason: format!("token {tok} is not admissible here"),
            });
        }
        self.edge_tokens.push(tok);
        if idx == self.slots.len() {
            self.edges_done = true;
        } else if let Some(src) = self.pending.take() {
            self.occupied[idx] = true;
            self.edges.push((self.slots[src].node, self.slots[idx].node));
        } else {
            self.pending = Some(idx);
        }
        Ok(())
    }
}

/// Admissible node-vocabulary tokens: START never; END once an output and
/// a generator exist; an output type only while its role is free; any type
/// only while the cheapest completion still fits the size caps.
pub fn valid_node_mask(state: &DecodeState, lib: &OpLibrary) -> Vec<bool> {
    let mut mask = vec![false; node_vocab(lib)];
    if state.nodes_done {
        return mask;
    }
    for op in lib.iter() {
        let role_free = op.output_role().is_none_or(|r| !state.roles.contains(&r));
        mask[op.type_id] = role_free && state.fits(lib, Some(op.type_id));
    }
    mask[node_start(lib)] = false;
    mask[node_end(lib)] = !state.roles.is_empty() && state.generators > 0;
    mask
}

/// Admissible pointers, with END as the final entry. Even positions take an
/// output slot that still has a legal partner, or END once every input
/// feeding an output is connected; odd positions take a free input slot
/// that creates neither a self-loop nor a cycle.
pub fn valid_slot_mask(state: &DecodeState, lib: &OpLibrary) -> Vec<bool> {
    let s = state.slots.len();
    let mut mask = vec![false; s + 1];
    if !state.nodes_done || state.edges_done {
        return mask;
    }
    let reach = state.closure();
    match state.pending {
        Some(src) => {
            for (i, m) in mask.iter_mut().enumerate().take(s) {
                *m = state.can_connect(&reach, src, i);
            }
        }
        None => {
            if state.edges.len() < MAX_EDGES {
                for i in 0..s {
                    mask[i] = state.slots[i].kind == SlotKind::Output
                        && (0..s).any(|j| state.can_connect(&reach, i, j));
                }
            }
            mask[s] = !state.has_open_inputs(lib);
        }
    }
    mask
}

/// Picks an admissible token from raw logits.
pub fn choose(logits: &[f64], mask: &[bool], cfg: &SamplerConfig, rng: &mut impl Rng, what: &str) -> Result<usize> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::DecodeStall(format!("{what}: every token masked")));
    }
    if cfg.greedy {
        let mut best = None;
        for (i, &l) in logits.iter().enumerate() {
            if mask[i] && best.is_none_or(|(_, b)| l > b) {
                best = Some((i, l));
            }
        }
        return Ok(best.expect("non-empty mask").0);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let probs = masked_softmax(&Mat::from_vec(1, scaled.len(), scaled), Some(mask)).data;
    let kept = nucleus_filter(&probs, cfg.top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in kept.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = Some(i);
            if u < acc {
                return Ok(i);
            }
        }
    }
    last.ok_or_else(|| Error::DecodeStall(format!("{what}: empty nucleus")))
}

/// A partial graph split into token prefixes in the stack's node order.
struct Prefix {
    types: Vec<usize>,
    edge_tokens: Vec<usize>,
    param_tokens: Vec<usize>,
}

fn prefix_of(partial: &NodeGraph, stack: &ModelStack, lib: &OpLibrary) -> Result<Prefix> {
    let report = validate_graph(partial, lib);
    if !report.ok {
        return Err(Error::InvalidGraph(format!("partial graph: {}", report.violations[0].message)));
    }
    let t = encode_with(partial, lib, stack.order)?;
    let types = t.node_types().to_vec();
    let edge_tokens = t.edge_seq[1..t.edge_seq.len() - 1].to_vec();
    let param_tokens = t.param_seq[1..t.param_seq.len() - 1].to_vec();
    Ok(Prefix {
        types,
        edge_tokens,
        param_tokens,
    })
}

/// Has an output and every input slot connected.
pub fn is_complete(g: &NodeGraph, lib: &OpLibrary) -> bool {
    let sources = g.input_sources();
    !g.outputs.is_empty()
        && g
            .nodes
            .iter()
            .all(|n| (0..lib.schema(n.type_id).n_inputs).all(|s| sources.contains_key(&(n.id, s))))
}

/// Samples one graph. With `partial`, its encoding is a fixed prefix and
/// only the continuation is sampled; a complete partial is returned as is.
pub fn sample_graph(
    stack: &ModelStack,
    cond: &[f64],
    cfg: &SamplerConfig,
    partial: Option<&NodeGraph>,
    lib: &OpLibrary,
) -> Result<NodeGraph> {
    sample_with_rng(stack, cond, cfg, partial, lib, &mut rng_for(cfg.seed, 0))
}

/// Independent candidates with per-candidate seeds; output order and
/// content do not depend on thread count.
pub fn sample_candidates(
    stack: &ModelStack,
    cond: &[f64],
    cfg: &SamplerConfig,
    partial: Option<&NodeGraph>,
    n: usize,
    lib: &OpLibrary,
) -> Result<Vec<NodeGraph>> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_with_rng(stack, cond, cfg, partial, lib, &mut rng_for(cfg.seed, i as u64 + 1)))
        .collect()
}

pub fn sample_with_rng(
    stack: &ModelStack,
    cond: &[f64],
    cfg: &SamplerConfig,
    partial: Option<&NodeGraph>,
    lib: &OpLibrary,
    rng: &mut ChaCha8Rng,
) -> Result<NodeGraph> {
    cfg.check()?;
    if cond.len() != stack.config.cond_dim {
        return Err(Error::Config(format!(
            "condition has {} entries, model expects {}",
            cond.len(),
            stack.config.cond_dim
        )));
    }
    if let Some(p) = partial {
        if is_complete(p, lib) && validate_graph(p, lib).ok {
            return Ok(p.clone());
        }
    }
    let prefix = partial.map(|p| prefix_of(p, stack, lib)).transpose()?;
    let mut state = DecodeState::new();

    let mut dec = stack.node.decoder(cond);
    let mut logits = dec.push(node_start(lib))?;
    for &t in prefix.iter().flat_map(|p| &p.types) {
        state.push_node(t, lib)?;
        logits = dec.push(t)?;
    }
    while !state.nodes_done {
        let mask = valid_node_mask(&state, lib);
        let tok = choose(&logits, &mask, cfg, rng, "node phase")?;
        state.push_node(tok, lib)?;
        if !state.nodes_done {
            logits = dec.push(tok)?;
        }
    }

    let mut dec = stack.edge.decoder(&state.types, &state.slots, cond)?;
    let mut logits = dec.push(EDGE_START)?;
    for &t in prefix.iter().flat_map(|p| &p.edge_tokens) {
        state.push_edge(t, lib)?;
        logits = dec.push(t)?;
    }
    let s = state.slots.len();
    while !state.edges_done {
        let mask = valid_slot_mask(&state, lib);
        let idx = choose(&logits, &mask, cfg, rng, "edge phase")?;
        let tok = if idx == s { EDGE_END } else { idx };
        state.push_edge(tok, lib)?;
        if !state.edges_done {
            logits = dec.push(tok)?;
        }
    }

    let mut dec = stack.param.decoder(&state.types, &state.edges, cond, lib)?;
    let layout = dec.slots.clone();
    let fixed = prefix.map(|p| p.param_tokens).unwrap_or_default();
    let mut seq = vec![PARAM_START];
    let mut logits = dec.push(PARAM_START)?;
    let bins: Vec<bool> = (0..logits.len()).map(|t| t < BINS).collect();
    for i in 1..layout.len() {
        let tok = match layout.forced(i) {
            Some(f) => f,
            None if i - 1 < fixed.len() => fixed[i - 1],
            None => choose(&logits, &bins, cfg, rng, "parameter phase")?,
        };
        seq.push(tok);
        if i + 1 < layout.len() {
            logits = dec.push(tok)?;
        }
    }

    let mut node_seq = vec![node_start(lib)];
    node_seq.extend(&state.types);
    node_seq.push(node_end(lib));
    let mut edge_seq = vec![EDGE_START];
    edge_seq.extend(&state.edge_tokens);
    let g = decode_sequences(&node_seq, &edge_seq, &seq, lib)?;
    let g = remove_unconnected_nodes(&g);
    let report = validate_graph(&g, lib);
    if !report.ok {
        return Err(Error::InvalidGraph(format!("sampled graph: {}", report.violations[0].message)));
    }
    Ok(g)
}
