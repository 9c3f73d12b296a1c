//! Synthetic training corpus: grammar-sampled base graphs, structural
//! preprocessing, parameter augmentation, rendering and shard emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, MaterialMaps};
use crate::graph::{reachable_to_outputs, remove_unconnected_nodes, Edge, NodeGraph};
use crate::image::ImagePlane;
use crate::matching::encode_prompt;
use crate::noise::hash_combine;
use crate::ops::{OpLibrary, ParamKind, ParamValue, Role};
use crate::render::{render, RenderConfig};
use crate::tokenizer::{self, canonicalize, NodeOrder, ShardRecord, MAX_EDGES, MAX_NODES, MAX_SLOTS};

pub const DEDUP_THRESHOLD: f64 = 0.01;
pub const CORPUS_FORMAT: &str = "matforge-corpus/1";

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_combine(seed, stream))
}

/// Probabilities steering the base-graph grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub max_blend_depth: usize,
    pub p_filter: f64,
    pub p_switch: f64,
    pub p_normal: f64,
    pub p_normal_levels: f64,
    pub p_roughness: f64,
    pub p_metallic: f64,
    pub p_dangling: f64,
    pub p_uniform_albedo: f64,
    pub p_hsl: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            max_blend_depth: 4,
            p_filter: 0.35,
            p_switch: 0.25,
            p_normal: 0.7,
            p_normal_levels: 0.3,
            p_roughness: 0.7,
            p_metallic: 0.2,
            p_dangling: 0.2,
            p_uniform_albedo: 0.1,
            p_hsl: 0.2,
        }
    }
}

struct Builder<'a> {
    g: NodeGraph,
    lib: &'a OpLibrary,
    cfg: &'a GrammarConfig,
    rng: ChaCha8Rng,
    next_seed: u64,
}

const GENERATORS: &[&str] = &[
    "perlin_noise",
    "fbm_noise",
    "cells",
    "checker",
    "gradient_linear",
    "brick",
];

const UNARY_FILTERS: &[&str] = &["levels", "invert", "blur_gaussian", "transform2d", "threshold"];

impl<'a> Builder<'a> {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.random_bool(p.clamp(0.0, 1.0))
    }

    /// Draws a parameter value from a visually useful sub-range.
    fn sample_param(&mut self, op: &str, index: usize) -> ParamValue {
        let schema = &self.lib.by_name(op).expect("known op").params[index];
        let (lo, hi) = match (op, schema.name) {
            (_, "scale") if schema.kind == ParamKind::Int => (2.0, schema.hi.min(10.0)),
            (_, "tiles") => (2.0, 8.0),
            (_, "rows") => (2.0, 6.0),
            (_, "cols") => (2.0, 8.0),
            ("levels", "in_lo" | "out_lo") => (0.0, 0.3),
            ("levels", "in_hi" | "out_hi") => (0.7, 1.0),
            ("levels", "gamma") => (0.5, 2.0),
            ("blend", "opacity") => (0.3, 1.0),
            ("blur_gaussian", "radius") => (0.0, 3.0),
            ("transform2d", "scale_x" | "scale_y") => (0.5, 2.0),
            ("threshold", "level") => (0.3, 0.7),
            ("normal_from_height", "strength") => (1.0, 8.0),
            ("hsl_adjust", "hue") => (-0.1, 0.1),
            ("hsl_adjust", "saturation") => (-0.3, 0.3),
            ("hsl_adjust", "lightness") => (-0.2, 0.2),
            _ => (schema.lo, schema.hi),
        };
        if schema.name == "seed" {
            let s = self.next_seed % 128;
            self.next_seed += 1;
            return ParamValue::Scalar(s as f64);
        }
        if schema.frozen {
            return schema.default.clone();
        }
        let draw = |rng: &mut ChaCha8Rng| {
            if schema.kind.is_discrete() {
                rng.random_range(lo as i64..=hi as i64) as f64
            } else {
                rng.random_range(lo..=hi)
            }
        };
        match schema.kind {
            ParamKind::FloatVec(n) => ParamValue::Vector((0..n).map(|_| draw(&mut self.rng)).collect()),
            _ => ParamValue::Scalar(draw(&mut self.rng)),
        }
    }

    fn node(&mut self, op: &str) -> usize {
        let schema = self.lib.by_name(op).expect("known op");
        let params = (0..schema.params.len()).map(|i| self.sample_param(op, i)).collect();
        self.g.add_node(self.lib, schema.type_id, params)
    }

    fn unary(&mut self, op: &str, input: usize) -> usize {
        let n = self.node(op);
        self.g.connect(input, 0, n, 0);
        n
    }

    fn generator(&mut self) -> usize {
        let op = GENERATORS[self.rng.random_range(0..GENERATORS.len())];
        self.node(op)
    }

    fn maybe_filter(&mut self, input: usize) -> usize {
        if !self.chance(self.cfg.p_filter) {
            return input;
        }
        if self.chance(0.15) {
            let warp = self.generator();
            let n = self.node("directional_warp");
            self.g.connect(input, 0, n, 0);
            self.g.connect(warp, 0, n, 1);
            return n;
        }
        let op = UNARY_FILTERS[self.rng.random_range(0..UNARY_FILTERS.len())];
        self.unary(op, input)
    }

    /// Grayscale-ish pattern: a left-leaning blend tree of `depth` blends.
    fn height(&mut self, depth: usize) -> usize {
        let mut n = self.generator();
        n = self.maybe_filter(n);
        for _ in 0..depth {
            let leaf = self.generator();
            let leaf = self.maybe_filter(leaf);
            let b = self.node("blend");
            self.g.connect(n, 0, b, 0);
            self.g.connect(leaf, 0, b, 1);
            n = b;
        }
        n
    }

    fn maybe_switch(&mut self, input: usize) -> usize {
        if !self.chance(self.cfg.p_switch) {
            return input;
        }
        let k = self.rng.random_range(2..=4usize);
        let name = ["switch2", "switch3", "switch4"][k - 2];
        let at = self.rng.random_range(0..k);
        let sw = self.node(name);
        let selector = self.rng.random_range(0..k) as f64;
        self.g.nodes[sw].params[0] = ParamValue::Scalar(selector);
        for slot in 0..k {
            let src = if slot == at {
                input
            } else {
                let gn = self.generator();
                self.maybe_filter(gn)
            };
            self.g.connect(src, 0, sw, slot);
        }
        sw
    }

    fn output(&mut self, role: Role, input: usize) {
        let op = self.lib.output_op(role).name;
        self.unary(op, input);
    }

    fn build(mut self) -> NodeGraph {
        let weights = [4usize, 4, 3, 2, 1];
        let max_depth = self.cfg.max_blend_depth.min(weights.len() - 1);
        let total: usize = weights[..=max_depth].iter().sum();
        let mut pick = self.rng.random_range(0..total);
        let mut depth = 0;
        while pick >= weights[depth] {
            pick -= weights[depth];
            depth += 1;
        }

        let height = self.height(depth);
        let height = self.maybe_switch(height);

        let mut albedo = if self.chance(self.cfg.p_uniform_albedo) {
            self.node("uniform_color")
        } else if self.chance(0.25) {
            let a = self.unary("colorize", height);
            let other = self.height(0);
            let c = self.unary("colorize", other);
            let b = self.node("blend");
            self.g.connect(a, 0, b, 0);
            self.g.connect(c, 0, b, 1);
            b
        } else {
            self.unary("colorize", height)
        };
        if self.chance(self.cfg.p_hsl) {
            albedo = self.unary("hsl_adjust", albedo);
        }
        self.output(Role::Albedo, albedo);

        if self.chance(self.cfg.p_normal) {
            let src = if self.chance(0.6) { height } else { self.height(0) };
            let mut n = self.unary("normal_from_height", src);
            if self.chance(self.cfg.p_normal_levels) {
                n = self.unary("levels", n);
            }
            self.output(Role::Normal, n);
        }
        if self.chance(self.cfg.p_roughness) {
            let r = match self.rng.random_range(0..3) {
                0 => self.unary("levels", height),
                1 => self.unary("invert", height),
                _ => {
                    let gn = self.generator();
                    self.unary("levels", gn)
                }
            };
            self.output(Role::Roughness, r);
        }
        if self.chance(self.cfg.p_metallic) {
            let m = self.unary("threshold", height);
            self.output(Role::Metallic, m);
        }
        if self.chance(self.cfg.p_dangling) {
            let gn = self.generator();
            self.unary("invert", gn);
        }
        self.g
    }
}

/// Samples `count` valid base graphs. Graph `i` depends only on `(seed, i)`.
pub fn generate_base_graphs(cfg: &GrammarConfig, lib: &OpLibrary, count: usize, seed: u64) -> Vec<NodeGraph> {
    (0..count)
        .map(|i| {
            let mut attempt = 0u64;
            loop {
                let b = Builder {
                    g: NodeGraph::new(),
                    lib,
                    cfg,
                    rng: rng_for(seed, ((i as u64) << 8) | attempt),
                    next_seed: 0,
                };
                let g = b.build();
                if filter_by_size(&g, lib) {
                    return g;
                }
                attempt += 1;
            }
        })
        .collect()
}

/// Drops branches that reach no output role, then removes `levels` nodes
/// that feed only the normal output, bridging their input to their consumers.
pub fn prune_unused_outputs(g: &NodeGraph, lib: &OpLibrary) -> NodeGraph {
    let mut g = remove_unconnected_nodes(g);
    let levels = lib.id("levels");
    loop {
        let Some(&normal_out) = g.outputs.get(&Role::Normal) else {
            return g;
        };
        let into_normal = upstream(&g, &[normal_out]);
        let others: Vec<usize> = g
            .outputs
            .iter()
            .filter(|(r, _)| **r != Role::Normal)
            .map(|(_, &id)| id)
            .collect();
        let into_others = upstream(&g, &others);
        let Some(target) = g
            .nodes
            .iter()
            .find(|n| n.type_id == levels && into_normal.contains(&n.id) && !into_others.contains(&n.id))
            .map(|n| n.id)
        else {
            return g;
        };
        let src = g.edges.iter().find(|e| e.to.node == target).map(|e| e.from);
        let mut edges: Vec<Edge> = Vec::with_capacity(g.edges.len());
        for e in &g.edges {
            if e.to.node == target {
                continue;
            }
            if e.from.node == target {
                if let Some(src) = src {
                    edges.push(Edge { from: src, to: e.to });
                }
                continue;
            }
            edges.push(*e);
        }
        g.edges = edges;
        g = remove_unconnected_nodes(&g);
    }
}

/// Nodes with a directed path into any of `targets`, including the targets.
fn upstream(g: &NodeGraph, targets: &[usize]) -> BTreeSet<usize> {
    let preds = g.predecessors();
    let mut seen: BTreeSet<usize> = targets.iter().copied().collect();
    let mut stack: Vec<usize> = targets.to_vec();
    while let Some(n) = stack.pop() {
        for &p in &preds[n] {
            if seen.insert(p) {
                stack.push(p);
            }
        }
    }
    seen
}

/// Replaces every switch with a direct edge from its chosen branch
/// (`choices[k]` for the k-th switch in id order) and prunes dead branches.
pub fn resolve_switches(g: &NodeGraph, lib: &OpLibrary, choices: &[usize]) -> NodeGraph {
    let switches: Vec<usize> = g
        .nodes
        .iter()
        .filter(|n| lib.schema(n.type_id).is_switch())
        .map(|n| n.id)
        .collect();
    let mut out = g.clone();
    for (&sw, &choice) in switches.iter().zip(choices) {
        let sources = out.input_sources();
        let src = sources.get(&(sw, choice)).copied();
        let mut edges = Vec::with_capacity(out.edges.len());
        for e in &out.edges {
            if e.to.node == sw {
                continue;
            }
            if e.from.node == sw {
                if let Some(src) = src {
                    edges.push(Edge { from: src, to: e.to });
                }
                continue;
            }
            edges.push(*e);
        }
        out.edges = edges;
    }
    let mut keep = reachable_to_outputs(&out);
    for sw in &switches {
        keep.remove(sw);
    }
    out.retain(&keep)
}

/// Splits a graph with switch nodes into switch-free variants. Emits
/// `min(combinations, max(k_b, cap))` variants where `k_b` is the largest
/// branch count; the first `k_b` cover every branch of every switch.
pub fn split_switch(g: &NodeGraph, lib: &OpLibrary, cap: usize) -> Vec<NodeGraph> {
    let radices: Vec<usize> = g
        .nodes
        .iter()
        .filter(|n| lib.schema(n.type_id).is_switch())
        .map(|n| lib.schema(n.type_id).n_inputs)
        .collect();
    if radices.is_empty() {
        return vec![g.clone()];
    }
    let k_b = *radices.iter().max().expect("non-empty");
    let combos = radices.iter().try_fold(1usize, |acc, &r| acc.checked_mul(r)).unwrap_or(usize::MAX);
    let n = combos.min(k_b.max(cap));

    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    for j in 0..k_b.min(n) {
        let c: Vec<usize> = radices.iter().map(|&r| j % r).collect();
        if seen.insert(c.clone()) {
            chosen.push(c);
        }
    }
    let mut index = 0usize;
    while chosen.len() < n && index < combos {
        let mut rest = index;
        let c: Vec<usize> = radices
            .iter()
            .map(|&r| {
                let d = rest % r;
                rest /= r;
                d
            })
            .collect();
        if seen.insert(c.clone()) {
            chosen.push(c);
        }
        index += 1;
    }
    chosen.iter().map(|c| resolve_switches(g, lib, c)).collect()
}

/// Indices of graphs kept by greedy deduplication in input order.
pub fn dedup_indices(graphs: &[NodeGraph], lib: &OpLibrary, res: usize, seed: u64) -> Result<Vec<usize>> {
    let maps: Vec<MaterialMaps> = graphs
        .par_iter()
        .map(|g| evaluate(g, lib, res, seed))
        .collect::<Result<_>>()?;
    let mut kept: Vec<usize> = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        if kept.iter().all(|&k| maps[k].mean_mse(m) >= DEDUP_THRESHOLD) {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn dedup(graphs: &[NodeGraph], lib: &OpLibrary, res: usize, seed: u64) -> Result<Vec<NodeGraph>> {
    Ok(dedup_indices(graphs, lib, res, seed)?
        .into_iter()
        .map(|i| graphs[i].clone())
        .collect())
}

pub fn filter_by_size(g: &NodeGraph, lib: &OpLibrary) -> bool {
    g.nodes.len() <= MAX_NODES && g.edges.len() <= MAX_EDGES && g.slot_count(lib) <= MAX_SLOTS
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamStat {
    pub std: f64,
    pub count: usize,
    pub reliable: bool,
}

/// Population statistics per (op type, parameter index, element index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStats {
    pub entries: BTreeMap<(usize, usize, usize), ParamStat>,
}

impl ParamStats {
    pub fn from_graphs(graphs: &[NodeGraph], threshold: usize) -> Self {
        let mut values: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
        for g in graphs {
            for n in &g.nodes {
                for (pi, p) in n.params.iter().enumerate() {
                    for (e, &v) in p.scalars().iter().enumerate() {
                        values.entry((n.type_id, pi, e)).or_default().push(v);
                    }
                }
            }
        }
        let entries = values
            .into_iter()
            .map(|(k, v)| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                let stat = ParamStat {
                    std: var.sqrt(),
                    count: v.len(),
                    reliable: v.len() >= threshold,
                };
                (k, stat)
            })
            .collect();
        ParamStats { entries }
    }

    pub fn get(&self, type_id: usize, param: usize, element: usize) -> Option<&ParamStat> {
        self.entries.get(&(type_id, param, element))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub alpha: f64,
    pub beta_float: f64,
    pub beta_int: f64,
    pub variants_per_graph: usize,
    pub reliability_threshold: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha: 0.06,
            beta_float: 0.2,
            beta_int: 0.5,
            variants_per_graph: 20,
            reliability_threshold: 20,
        }
    }
}

/// Draws one scalar around the stored value `mu`.
pub fn augment_scalar(
    mu: f64,
    stat: Option<&ParamStat>,
    discrete: bool,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> f64 {
    match stat {
        Some(s) if s.reliable => {
            let beta = if discrete { cfg.beta_int } else { cfg.beta_float };
            let z: f64 = rng.sample(StandardNormal);
            mu + beta * s.std * z
        }
        _ => {
            let (a, b) = ((1.0 - cfg.alpha) * mu, (1.0 + cfg.alpha) * mu);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
    }
}

/// Produces `cfg.variants_per_graph` parameter variants of `g`. Enumerations
/// and frozen parameters (seeds, switch selectors) keep their values.
pub fn augment_parameters(
    g: &NodeGraph,
    lib: &OpLibrary,
    stats: &ParamStats,
    cfg: &AugmentConfig,
    seed: u64,
) -> Vec<NodeGraph> {
    (0..cfg.variants_per_graph)
        .map(|v| augment_variant(g, lib, stats, cfg, seed, v))
        .collect()
}

/// Variant number `v` of `g`; `augment_parameters` returns variants
/// `0..variants_per_graph`, so larger `v` gives unseen variants.
pub fn augment_variant(
    g: &NodeGraph,
    lib: &OpLibrary,
    stats: &ParamStats,
    cfg: &AugmentConfig,
    seed: u64,
    v: usize,
) -> NodeGraph {
    let mut rng = rng_for(seed, v as u64);
    let mut out = g.clone();
    for node in &mut out.nodes {
        let op = lib.schema(node.type_id);
        for (pi, (schema, value)) in op.params.iter().zip(&mut node.params).enumerate() {
            if schema.frozen || matches!(schema.kind, ParamKind::Enum(_)) {
                continue;
            }
            let discrete = schema.kind.is_discrete();
            for (e, s) in value.scalars_mut().iter_mut().enumerate() {
                let stat = stats.get(node.type_id, pi, e);
                let mut x = augment_scalar(*s, stat, discrete, cfg, &mut rng);
                if discrete {
                    x = x.round();
                }
                *s = x.clamp(schema.lo, schema.hi);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub base_graphs: usize,
    pub grammar: GrammarConfig,
    pub switch_cap: usize,
    pub resolution: usize,
    pub val_fraction: f64,
    pub augment: AugmentConfig,
    pub render: RenderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            base_graphs: 500,
            grammar: GrammarConfig::default(),
            switch_cap: 5,
            resolution: crate::eval::DEFAULT_RESOLUTION,
            val_fraction: 0.1,
            augment: AugmentConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub generated: usize,
    pub pruned: usize,
    pub split: usize,
    pub deduplicated: usize,
    pub size_filtered: usize,
    pub topologies: usize,
    pub train_graphs: usize,
    pub val_graphs: usize,
    pub train_records: usize,
    pub val_records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub seed: u64,
    pub config: CorpusConfig,
    pub counts: StageCounts,
    /// Share of split graphs surviving dedup and size filtering.
    pub retained_fraction: f64,
    pub train_graph_ids: Vec<usize>,
    pub val_graph_ids: Vec<usize>,
    pub files: Vec<String>,
}

/// One post-filter graph with its split assignment.
#[derive(Clone, Debug)]
pub struct CorpusGraph {
    pub graph_id: usize,
    pub base_id: usize,
    pub graph: NodeGraph,
    pub val: bool,
}

/// Runs generation through size filtering, canonicalizes and assigns the
/// train/validation split by topology.
pub fn prepare_graphs(cfg: &CorpusConfig, lib: &OpLibrary) -> Result<(Vec<CorpusGraph>, StageCounts)> {
    let mut counts = StageCounts::default();
    let base = generate_base_graphs(&cfg.grammar, lib, cfg.base_graphs, cfg.seed);
    counts.generated = base.len();
    let pruned: Vec<NodeGraph> = base.iter().map(|g| prune_unused_outputs(g, lib)).collect();
    counts.pruned = pruned.len();
    let mut split = Vec::new();
    for (base_id, g) in pruned.iter().enumerate() {
        for v in split_switch(g, lib, cfg.switch_cap) {
            split.push((base_id, v));
        }
    }
    counts.split = split.len();
    let graphs: Vec<NodeGraph> = split.iter().map(|(_, g)| g.clone()).collect();
    let kept = dedup_indices(&graphs, lib, cfg.resolution, cfg.seed)?;
    counts.deduplicated = kept.len();
    let filtered: Vec<(usize, NodeGraph)> = kept
        .into_iter()
        .filter(|&i| filter_by_size(&graphs[i], lib))
        .map(|i| (split[i].0, canonicalize(&graphs[i], lib, NodeOrder::BackToFront)))
        .collect();
    counts.size_filtered = filtered.len();
    if filtered.is_empty() {
        return Err(Error::EmptyCorpus("size filtering".into()));
    }

    let topo_key = |g: &NodeGraph| -> Result<(Vec<usize>, Vec<usize>)> {
        let t = tokenizer::encode(g, lib)?;
        Ok((t.node_seq, t.edge_seq))
    };
    let keys: Vec<(Vec<usize>, Vec<usize>)> = filtered.iter().map(|(_, g)| topo_key(g)).collect::<Result<_>>()?;
    let mut topologies: Vec<&(Vec<usize>, Vec<usize>)> = keys.iter().collect::<BTreeSet<_>>().into_iter().collect();
    counts.topologies = topologies.len();
    topologies.shuffle(&mut rng_for(cfg.seed, 0x5917));
    let n_val = if topologies.len() >= 2 {
        ((topologies.len() as f64 * cfg.val_fraction).ceil() as usize).clamp(1, topologies.len() - 1)
    } else {
        0
    };
    let val_topologies: BTreeSet<&(Vec<usize>, Vec<usize>)> = topologies[..n_val].iter().copied().collect();

    let out: Vec<CorpusGraph> = filtered
        .into_iter()
        .zip(&keys)
        .enumerate()
        .map(|(graph_id, ((base_id, graph), key))| CorpusGraph {
            graph_id,
            base_id,
            graph,
            val: val_topologies.contains(key),
        })
        .collect();
    counts.val_graphs = out.iter().filter(|g| g.val).count();
    counts.train_graphs = out.len() - counts.val_graphs;
    Ok((out, counts))
}

pub fn render_path(graph_id: usize, variant_id: usize) -> String {
    format!("renders/g{graph_id:05}_v{variant_id:03}.png")
}

/// Renders an already quantized graph and packs it as a shard record.
pub fn make_record(
    graph_id: usize,
    variant_id: usize,
    g: &NodeGraph,
    lib: &OpLibrary,
    cfg: &CorpusConfig,
) -> Result<(ShardRecord, ImagePlane)> {
    let image = render(&evaluate(g, lib, cfg.resolution, cfg.seed)?, &cfg.render).quantized_u8();
    let t = tokenizer::encode(g, lib)?;
    let record = ShardRecord {
        graph_id,
        variant_id,
        node_seq: t.node_seq,
        edge_seq: t.edge_seq,
        param_seq: t.param_seq,
        aux: t.aux,
        cond: encode_prompt(&image),
        render: render_path(graph_id, variant_id),
    };
    Ok((record, image))
}

/// Unseen parameter variants of corpus graphs, drawn from the same
/// per-graph streams as the stored variants but past their end. Entry `k`
/// of the result is variant `variants_per_graph + k` of its graph.
pub fn fresh_variants(
    graphs: &[(usize, &NodeGraph)],
    lib: &OpLibrary,
    stats: &ParamStats,
    cfg: &CorpusConfig,
    per_graph: usize,
) -> Result<Vec<(ShardRecord, ImagePlane, NodeGraph)>> {
    let jobs: Vec<(usize, usize, &NodeGraph)> = graphs
        .iter()
        .flat_map(|&(id, g)| (0..per_graph).map(move |k| (id, cfg.augment.variants_per_graph + k, g)))
        .collect();
    jobs.par_iter()
        .map(|&(id, v, g)| {
            let seed = hash_combine(cfg.seed, id as u64);
            let variant = augment_variant(g, lib, stats, &cfg.augment, seed, v);
            let variant = tokenizer::quantize_graph(&variant, lib, tokenizer::BINS);
            let (record, image) = make_record(id, v, &variant, lib, cfg)?;
            Ok((record, image, variant))
        })
        .collect()
}

/// Stored base graphs of a built corpus, keyed by graph id.
pub fn load_corpus_graphs(dir: &Path, ids: &[usize], lib: &OpLibrary) -> Result<Vec<(usize, NodeGraph)>> {
    ids.iter()
        .map(|&id| {
            let path = dir.join(format!("graphs/g{id:05}.json"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok((id, NodeGraph::from_json(&text, lib)?))
        })
        .collect()
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Builds the full corpus under `out_dir`: `train.jsonl`, `val.jsonl`,
/// `renders/`, `graphs/` and `manifest.json`.
pub fn build_corpus(cfg: &CorpusConfig, lib: &OpLibrary, out_dir: &Path) -> Result<CorpusManifest> {
    let (graphs, mut counts) = prepare_graphs(cfg, lib)?;
    let all: Vec<NodeGraph> = graphs.iter().map(|g| g.graph.clone()).collect();
    let stats = ParamStats::from_graphs(&all, cfg.augment.reliability_threshold);

    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out_dir)?;
    mkdir(&out_dir.join("renders"))?;
    mkdir(&out_dir.join("graphs"))?;

    let mut files = Vec::new();
    for g in &graphs {
        let rel = format!("graphs/g{:05}.json", g.graph_id);
        let path = out_dir.join(&rel);
        fs::write(&path, g.graph.to_json(lib)).map_err(|e| Error::io(&path, e))?;
        files.push(rel);
    }

    let jobs: Vec<(usize, usize, NodeGraph)> = graphs
        .iter()
        .flat_map(|g| {
            augment_parameters(&g.graph, lib, &stats, &cfg.augment, hash_combine(cfg.seed, g.graph_id as u64))
                .into_iter()
                .enumerate()
                .map(move |(v, variant)| (g.graph_id, v, tokenizer::quantize_graph(&variant, lib, tokenizer::BINS)))
        })
        .collect();

    let records: Vec<ShardRecord> = jobs
        .par_iter()
        .map(|(graph_id, variant_id, g)| {
            let (record, image) = make_record(*graph_id, *variant_id, g, lib, cfg)?;
            image.write_png(out_dir.join(&record.render), None)?;
            Ok(record)
        })
        .collect::<Result<_>>()?;

    let val_ids: BTreeSet<usize> = graphs.iter().filter(|g| g.val).map(|g| g.graph_id).collect();
    for (name, is_val) in [("train.jsonl", false), ("val.jsonl", true)] {
        let path = out_dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut n = 0;
        for r in records.iter().filter(|r| val_ids.contains(&r.graph_id) == is_val) {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            n += 1;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        if is_val {
            counts.val_records = n;
        } else {
            counts.train_records = n;
        }
        files.push(name.to_string());
    }
    files.extend(records.iter().map(|r| r.render.clone()));

    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        retained_fraction: counts.size_filtered as f64 / counts.split.max(1) as f64,
        counts,
        train_graph_ids: graphs.iter().filter(|g| !g.val).map(|g| g.graph_id).collect(),
        val_graph_ids: val_ids.into_iter().collect(),
        files,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_shard(path: &Path) -> Result<Vec<ShardRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Train and validation records of a built corpus directory.
pub fn load_corpus(dir: &Path) -> Result<(Vec<ShardRecord>, Vec<ShardRecord>)> {
    Ok((load_shard(&dir.join("train.jsonl"))?, load_shard(&dir.join("val.jsonl"))?))
}

pub fn corpus_file(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    fn lib() -> &'static OpLibrary {
        OpLibrary::standard()
    }

    fn uniform(value: f64) -> NodeGraph {
        let lib = lib();
        let mut g = NodeGraph::new();
        let u = g.add_node(lib, lib.id("uniform_color"), vec![ParamValue::Vector(vec![value; 3])]);
        let o = g.add(lib, "output_albedo");
        g.connect(u, 0, o, 0);
        g
    }

    #[test]
    fn base_graphs_are_valid_and_deterministic() {
        let lib = lib();
        let cfg = GrammarConfig::default();
        let a = generate_base_graphs(&cfg, lib, 40, 3);
        let b = generate_base_graphs(&cfg, lib, 40, 3);
        assert_eq!(a, b);
        for g in &a {
            let report = validate_graph(g, lib);
            assert!(report.ok, "{:?}", report.violations);
            assert!(filter_by_size(g, lib));
        }
    }

    #[test]
    fn base_graphs_are_structurally_diverse() {
        let lib = lib();
        let graphs = generate_base_graphs(&GrammarConfig::default(), lib, 500, 11);
        let distinct: BTreeSet<Vec<usize>> = graphs
            .iter()
            .map(|g| tokenizer::encode(g, lib).unwrap().node_seq)
            .collect();
        assert!(distinct.len() >= 50, "{}", distinct.len());
    }

    #[test]
    fn dedup_thresholds() {
        let lib = lib();
        // Albedo MSE (0.05)^2 = 0.0025, other maps identical.
        let kept = dedup(&[uniform(0.5), uniform(0.55)], lib, 8, 0).unwrap();
        assert_eq!(kept.len(), 1);
        let kept = dedup(&[uniform(0.0), uniform(1.0)], lib, 8, 0).unwrap();
        assert_eq!(kept.len(), 2);
        let kept = dedup(&[uniform(0.3), uniform(0.3)], lib, 8, 0).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn size_filter_is_strict_greater_than() {
        let lib = lib();
        let mut g = NodeGraph::new();
        for _ in 0..80 {
            g.add(lib, "checker");
        }
        assert!(filter_by_size(&g, lib));
        g.add(lib, "checker");
        assert!(!filter_by_size(&g, lib));

        let mut g = NodeGraph::new();
        let src = g.add(lib, "checker");
        for _ in 0..67 {
            let s = g.add(lib, "switch3");
            for slot in 0..3 {
                g.connect(src, 0, s, slot);
            }
        }
        assert_eq!(g.edges.len(), 201);
        assert!(!filter_by_size(&g, lib));
    }

    #[test]
    fn normal_levels_are_pruned_and_bridged() {
        let lib = lib();
        let mut g = NodeGraph::new();
        let h = g.add(lib, "perlin_noise");
        let n = g.add(lib, "normal_from_height");
        let l = g.add(lib, "levels");
        let o = g.add(lib, "output_normal");
        g.add(lib, "checker");
        g.connect(h, 0, n, 0);
        g.connect(n, 0, l, 0);
        g.connect(l, 0, o, 0);
        g.nodes[l].params[2] = ParamValue::Scalar(2.0);
        let pruned = prune_unused_outputs(&g, lib);
        assert_eq!(pruned.nodes.len(), 3);
        assert!(pruned.nodes.iter().all(|n| n.type_id != lib.id("levels")));
        assert!(!pruned.nodes.iter().any(|n| n.type_id == lib.id("checker")));

        let mut bridged = NodeGraph::new();
        let h2 = bridged.add(lib, "perlin_noise");
        let n2 = bridged.add(lib, "normal_from_height");
        let o2 = bridged.add(lib, "output_normal");
        bridged.connect(h2, 0, n2, 0);
        bridged.connect(n2, 0, o2, 0);
        let a = evaluate(&pruned, lib, 16, 1).unwrap();
        let b = evaluate(&bridged, lib, 16, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(prune_unused_outputs(&bridged, lib), bridged);
    }

    fn with_selector(g: &NodeGraph, lib: &OpLibrary, choices: &[usize]) -> NodeGraph {
        let mut g = g.clone();
        let mut k = 0;
        for n in &mut g.nodes {
            if lib.schema(n.type_id).is_switch() {
                n.params[0] = ParamValue::Scalar(choices[k] as f64);
                k += 1;
            }
        }
        g
    }

    #[test]
    fn split_single_switch_matches_selector() {
        let lib = lib();
        let mut g = NodeGraph::new();
        let a = g.add(lib, "perlin_noise");
        let b = g.add(lib, "checker");
        let c = g.add(lib, "cells");
        let s = g.add(lib, "switch3");
        let o = g.add(lib, "output_roughness");
        g.connect(a, 0, s, 0);
        g.connect(b, 0, s, 1);
        g.connect(c, 0, s, 2);
        g.connect(s, 0, o, 0);
        let variants = split_switch(&g, lib, 5);
        assert_eq!(variants.len(), 3);
        for (k, v) in variants.iter().enumerate() {
            assert!(v.nodes.iter().all(|n| !lib.schema(n.type_id).is_switch()));
            let expect = evaluate(&with_selector(&g, lib, &[k]), lib, 16, 4).unwrap();
            assert_eq!(evaluate(v, lib, 16, 4).unwrap(), expect);
        }
    }

    #[test]
    fn split_two_binary_switches_gives_four() {
        let lib = lib();
        let mut g = NodeGraph::new();
        let a = g.add(lib, "perlin_noise");
        let b = g.add(lib, "checker");
        let s1 = g.add(lib, "switch2");
        let s2 = g.add(lib, "switch2");
        let c = g.add(lib, "brick");
        let o = g.add(lib, "output_roughness");
        g.connect(a, 0, s1, 0);
        g.connect(b, 0, s1, 1);
        g.connect(s1, 0, s2, 0);
        g.connect(c, 0, s2, 1);
        g.connect(s2, 0, o, 0);
        let variants = split_switch(&g, lib, 5);
        assert_eq!(variants.len(), 4);
        assert!(split_switch(&uniform(0.2), lib, 5) == vec![uniform(0.2)]);
    }

    #[test]
    fn split_covers_every_branch_with_many_switches() {
        let lib = lib();
        let mut g = NodeGraph::new();
        let mut prev = g.add(lib, "checker");
        for _ in 0..3 {
            let s = g.add(lib, "switch4");
            g.connect(prev, 0, s, 0);
            for slot in 1..4 {
                let gen = g.add(lib, "perlin_noise");
                g.connect(gen, 0, s, slot);
            }
            prev = s;
        }
        let o = g.add(lib, "output_roughness");
        g.connect(prev, 0, o, 0);
        // 64 combinations, k_b = 4, cap 5.
        let variants = split_switch(&g, lib, 5);
        assert_eq!(variants.len(), 5);
    }

    fn stat(std: f64, reliable: bool) -> ParamStat {
        ParamStat {
            std,
            count: if reliable { 100 } else { 1 },
            reliable,
        }
    }

    #[test]
    fn gaussian_augmentation_moments() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = stat(0.1, true);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| augment_scalar(0.4, Some(&s), false, &cfg, &mut rng))
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((mean - 0.4).abs() < 0.005, "{mean}");
        assert!((std - 0.02).abs() < 0.003, "{std}");
    }

    #[test]
    fn uniform_fallback_stays_in_band() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let x = augment_scalar(0.5, Some(&stat(0.3, false)), false, &cfg, &mut rng);
            assert!((0.47..=0.53).contains(&x), "{x}");
        }
    }

    #[test]
    fn zero_std_keeps_values_and_frozen_params_never_move() {
        let lib = lib();
        let mut g = NodeGraph::new();
        let p = g.add(lib, "perlin_noise");
        let t = g.add(lib, "threshold");
        let o = g.add(lib, "output_roughness");
        g.connect(p, 0, t, 0);
        g.connect(t, 0, o, 0);
        g.nodes[p].params[1] = ParamValue::Scalar(17.0);
        let mut stats = ParamStats::default();
        stats.entries.insert((lib.id("threshold"), 0, 0), stat(0.0, true));
        stats.entries.insert((lib.id("perlin_noise"), 0, 0), stat(0.0, true));
        let cfg = AugmentConfig {
            variants_per_graph: 10,
            ..AugmentConfig::default()
        };
        for v in augment_parameters(&g, lib, &stats, &cfg, 1) {
            assert_eq!(v, g);
        }
    }

    #[test]
    fn corpus_build_is_deterministic_and_split_by_topology() {
        let lib = lib();
        let cfg = CorpusConfig {
            base_graphs: 12,
            resolution: 16,
            augment: AugmentConfig {
                variants_per_graph: 2,
                ..AugmentConfig::default()
            },
            val_fraction: 0.25,
            seed: 5,
            ..CorpusConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_corpus(&cfg, lib, d1.path()).unwrap();
        let m2 = build_corpus(&cfg, lib, d2.path()).unwrap();
        assert_eq!(m1, m2);
        for f in &m1.files {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let (train, val) = load_corpus(d1.path()).unwrap();
        assert!(!train.is_empty() && !val.is_empty());
        let val_ids: BTreeSet<usize> = val.iter().map(|r| r.graph_id).collect();
        assert!(train.iter().all(|r| !val_ids.contains(&r.graph_id)));
        let train_topo: BTreeSet<(&Vec<usize>, &Vec<usize>)> =
            train.iter().map(|r| (&r.node_seq, &r.edge_seq)).collect();
        assert!(val.iter().all(|r| !train_topo.contains(&(&r.node_seq, &r.edge_seq))));
        for r in train.iter().chain(&val) {
            let g = tokenizer::decode(&r.tokens(lib).unwrap(), lib).unwrap();
            assert!(validate_graph(&g, lib).ok);
            let maps = evaluate(&g, lib, cfg.resolution, cfg.seed).unwrap();
            let image = render(&maps, &cfg.render).quantized_u8();
            let stored = crate::image::ImagePlane::read_png(d1.path().join(&r.render)).unwrap();
            assert!(image.max_abs_diff(&stored) <= 0.5 / 255.0 + 1e-6);
        }
    }
}
