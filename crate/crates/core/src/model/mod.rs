//! Conditional autoregressive models over the three token streams.

pub mod edge;
pub mod layers;
pub mod node;
pub mod param;
pub mod train;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeGraph, SlotKind, SlotRef};
use crate::matching::PROMPT_DIM;
use crate::nn::{Mat, Params, Tape, Var};
use crate::ops::OpLibrary;
use crate::tokenizer::{decode_sequences, encode_with, parse_node_seq, slot_list, NodeOrder, ShardRecord, EDGE_START};

pub use edge::{EdgeDecoder, EdgeModel};
pub use node::{NodeDecoder, NodeModel};
pub use param::{ParamDecoder, ParamModel, ParamSlots};
pub use train::{evaluate_loss, stack_samples, train, train_stack, EpochLog, TrainConfig, TrainReport};

pub const CHECKPOINT_FORMAT: &str = "matforge-ckpt/1";

/// Bound on standardized condition entries.
pub const COND_CLAMP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub node: Dims,
    pub edge: Dims,
    pub param: Dims,
    pub encoder_layers: usize,
    pub gcn_layers: usize,
    pub cond_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            node: Dims { hidden: 40, layers: 2, heads: 4 },
            edge: Dims { hidden: 48, layers: 2, heads: 4 },
            param: Dims { hidden: 96, layers: 4, heads: 4 },
            encoder_layers: 2,
            gcn_layers: 6,
            cond_dim: PROMPT_DIM,
            seed: 0,
        }
    }
}

/// Adds an embedding table with N(0, 1/d) entries.
pub fn embedding(p: &mut Params, name: &str, rows: usize, d: usize, rng: &mut impl Rng) -> usize {
    p.add(name, Mat::randn(rows, d, 1.0 / (d as f64).sqrt(), rng))
}

/// A model trainable by [`train`].
pub trait SeqModel: Sync {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// Summed cross-entropy of one sample and the number of scored targets.
    fn sample_loss(&self, t: &mut Tape, s: &TrainSample, cond: &[f64], lib: &OpLibrary) -> Result<(Var, usize)>;
}

/// Token streams of one graph plus its condition vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub node_seq: Vec<usize>,
    pub edge_seq: Vec<usize>,
    pub param_seq: Vec<usize>,
    pub cond: Vec<f64>,
}

impl TrainSample {
    /// Shards store back-to-front sequences; other orders are re-encoded.
    pub fn from_record(r: &ShardRecord, lib: &OpLibrary, order: NodeOrder, norm: &CondNorm) -> Result<Self> {
        let cond = norm.apply(&r.cond);
        if order == NodeOrder::BackToFront {
            return Ok(TrainSample {
                node_seq: r.node_seq.clone(),
                edge_seq: r.edge_seq.clone(),
                param_seq: r.param_seq.clone(),
                cond,
            });
        }
        let g = decode_sequences(&r.node_seq, &r.edge_seq, &r.param_seq, lib)?;
        Self::from_graph(&g, lib, order, cond)
    }

    pub fn from_graph(g: &NodeGraph, lib: &OpLibrary, order: NodeOrder, cond: Vec<f64>) -> Result<Self> {
        let t = encode_with(g, lib, order)?;
        Ok(TrainSample {
            node_seq: t.node_seq,
            edge_seq: t.edge_seq,
            param_seq: t.param_seq,
            cond,
        })
    }

    /// Node types and slot list.
    pub fn structure(&self, lib: &OpLibrary) -> Result<(Vec<usize>, Vec<SlotRef>)> {
        let types = parse_node_seq(&self.node_seq, lib)?;
        let slots = slot_list(&types, lib);
        Ok((types, slots))
    }

    pub fn ordinal_edges(&self, lib: &OpLibrary) -> Result<Vec<(usize, usize)>> {
        let (_, slots) = self.structure(lib)?;
        ordinal_edges(&self.edge_seq, &slots)
    }
}

/// `(source ordinal, target ordinal)` per complete pointer pair in an edge
/// sequence; special tokens are skipped.
pub fn ordinal_edges(edge_seq: &[usize], slots: &[SlotRef]) -> Result<Vec<(usize, usize)>> {
    let ptrs: Vec<usize> = edge_seq.iter().copied().filter(|&p| p < EDGE_START).collect();
    let mut out = Vec::with_capacity(ptrs.len() / 2);
    for pair in ptrs.chunks_exact(2) {
        let (a, b) = match (slots.get(pair[0]), slots.get(pair[1])) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::InconsistentEdges(format!("pointer pair {pair:?} outside slot list"))),
        };
        if a.kind != SlotKind::Output || b.kind != SlotKind::Input {
            return Err(Error::InconsistentEdges(format!("pointer pair {pair:?} is not output to input")));
        }
        out.push((a.node, b.node));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Node,
    Edge,
    Param,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Node, ModelKind::Edge, ModelKind::Param];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Node => "node",
            ModelKind::Edge => "edge",
            ModelKind::Param => "param",
        }
    }
}

/// Per-dimension standardization of raw prompt embeddings. The zero
/// vector after standardization is the unconditional input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CondNorm {
    pub fn identity(dim: usize) -> Self {
        CondNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation over `conds`; near-constant
    /// dimensions keep unit scale.
    pub fn fit(conds: &[&[f32]], dim: usize) -> Self {
        let n = conds.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for c in conds {
            mean.iter_mut().zip(c.iter()).for_each(|(m, &v)| *m += v as f64 / n);
        }
        let mut var = vec![0.0; dim];
        for c in conds {
            var.iter_mut()
                .zip(c.iter().zip(&mean))
                .for_each(|(s, (&v, m))| *s += (v as f64 - m).powi(2) / n);
        }
        let std = var.iter().map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 }).collect();
        CondNorm { mean, std }
    }

    pub fn apply(&self, raw: &[f32]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| ((v as f64 - m) / s).clamp(-COND_CLAMP, COND_CLAMP))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub order: NodeOrder,
    pub cond_norm: CondNorm,
    pub params: Params,
}

/// The three models of one generator.
#[derive(Clone, Debug)]
pub struct ModelStack {
    pub config: ModelConfig,
    pub order: NodeOrder,
    pub cond_norm: CondNorm,
    pub node: NodeModel,
    pub edge: EdgeModel,
    pub param: ParamModel,
}

impl ModelStack {
    pub fn new(config: ModelConfig, order: NodeOrder, lib: &OpLibrary) -> Self {
        let c = &config;
        ModelStack {
            node: NodeModel::new(c.node, lib, c.cond_dim, c.seed),
            edge: EdgeModel::new(c.edge, lib, c.cond_dim, c.seed.wrapping_add(1)),
            param: ParamModel::new(c.param, c.encoder_layers, c.gcn_layers, lib, c.cond_dim, c.seed.wrapping_add(2)),
            cond_norm: CondNorm::identity(config.cond_dim),
            config,
            order,
        }
    }

    /// Model input for a raw prompt embedding.
    pub fn condition(&self, raw: &[f32]) -> Vec<f64> {
        self.cond_norm.apply(raw)
    }

    /// Model input meaning "no prompt".
    pub fn unconditional(&self) -> Vec<f64> {
        vec![0.0; self.config.cond_dim]
    }

    pub fn params(&self, kind: ModelKind) -> &Params {
        match kind {
            ModelKind::Node => &self.node.params,
            ModelKind::Edge => &self.edge.params,
            ModelKind::Param => &self.param.params,
        }
    }

    fn params_mut(&mut self, kind: ModelKind) -> &mut Params {
        match kind {
            ModelKind::Node => &mut self.node.params,
            ModelKind::Edge => &mut self.edge.params,
            ModelKind::Param => &mut self.param.params,
        }
    }

    pub fn checkpoint(&self, kind: ModelKind) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind,
            config: self.config.clone(),
            order: self.order,
            cond_norm: self.cond_norm.clone(),
            params: self.params(kind).clone(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for kind in ModelKind::ALL {
            let path = dir.join(format!("{}.json", kind.name()));
            let text = serde_json::to_string(&self.checkpoint(kind))?;
            fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, lib: &OpLibrary) -> Result<Self> {
        let mut stack: Option<ModelStack> = None;
        for kind in ModelKind::ALL {
            let path = dir.join(format!("{}.json", kind.name()));
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let ck: Checkpoint = serde_json::from_str(&text)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            if ck.format != CHECKPOINT_FORMAT {
                return Err(Error::Checkpoint(format!("{}: unknown format {}", path.display(), ck.format)));
            }
            if ck.kind != kind {
                return Err(Error::Checkpoint(format!("{}: holds a {} model", path.display(), ck.kind.name())));
            }
            let s = stack.get_or_insert_with(|| {
                let mut s = ModelStack::new(ck.config.clone(), ck.order, lib);
                s.cond_norm = ck.cond_norm.clone();
                s
            });
            if s.config != ck.config || s.order != ck.order || s.cond_norm != ck.cond_norm {
                return Err(Error::Checkpoint(format!("{}: configuration differs from node.json", path.display())));
            }
            let target = s.params_mut(kind);
            let compatible = target.names == ck.params.names
                && target
                    .tensors
                    .iter()
                    .zip(&ck.params.tensors)
                    .all(|(a, b)| a.rows == b.rows && a.cols == b.cols && b.data.len() == b.rows * b.cols);
            if !compatible {
                return Err(Error::Checkpoint(format!("{}: tensor layout mismatch", path.display())));
            }
            *target = ck.params;
        }
        Ok(stack.expect("three checkpoints loaded"))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}
