use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{causal_mask, embed_sum, CondMlp, KvCache, Linear, Stack};
use super::{embedding, Dims, SeqModel, TrainSample};
use crate::error::{Error, Result};
use crate::nn::{Mat, Params, Tape, Var};
use crate::ops::OpLibrary;
use crate::tokenizer::{node_vocab, MAX_NODE_LEN};

/// Causal decoder over the node-type sequence.
#[derive(Clone, Debug)]
pub struct NodeModel {
    pub dims: Dims,
    pub params: Params,
    pub vocab: usize,
    tok: usize,
    pos: usize,
    cond: CondMlp,
    stack: Stack,
    head: Linear,
}

impl NodeModel {
    pub fn new(dims: Dims, lib: &OpLibrary, cond_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let d = dims.hidden;
        let vocab = node_vocab(lib);
        let tok = embedding(&mut p, "node.tok", vocab, d, &mut rng);
        let pos = embedding(&mut p, "node.pos", MAX_NODE_LEN, d, &mut rng);
        let cond = CondMlp::new(&mut p, "node.cond", cond_dim, d, &mut rng);
        let stack = Stack::new(&mut p, "node.blk", d, dims.layers, dims.heads, &mut rng);
        let head = Linear::new(&mut p, "node.head", d, vocab, &mut rng);
        NodeModel {
            dims,
            params: p,
            vocab,
            tok,
            pos,
            cond,
            stack,
            head,
        }
    }

    /// Next-token logits for every prefix of `inputs` (`len x vocab`).
    pub fn forward(&self, t: &mut Tape, inputs: &[usize], cond: &[f64]) -> Result<Var> {
        if inputs.len() > MAX_NODE_LEN {
            return Err(Error::PrefixTooLong {
                len: inputs.len(),
                max: MAX_NODE_LEN,
            });
        }
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let e = t.embed(self.tok, inputs);
        let pe = t.embed(self.pos, &positions);
        let x = t.add(e, pe);
        let c = self.cond.forward(t, cond);
        let mask = causal_mask(inputs.len());
        let h = self.stack.forward(t, x, Some(&mask), Some(c));
        Ok(self.head.forward(t, h))
    }

    pub fn decoder(&self, cond: &[f64]) -> NodeDecoder<'_> {
        NodeDecoder {
            m: self,
            caches: self.stack.new_caches(),
            cond: self.cond.apply(&self.params, cond),
            pos: 0,
        }
    }
}

impl SeqModel for NodeModel {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn sample_loss(&self, t: &mut Tape, s: &TrainSample, cond: &[f64], _lib: &OpLibrary) -> Result<(Var, usize)> {
        let n = s.node_seq.len();
        let logits = self.forward(t, &s.node_seq[..n - 1], cond)?;
        let targets: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, s.node_seq[i + 1])).collect();
        Ok((t.cross_entropy(logits, &targets), targets.len()))
    }
}

/// Incremental decoding with cached keys and values.
pub struct NodeDecoder<'m> {
    m: &'m NodeModel,
    caches: Vec<KvCache>,
    cond: Vec<f64>,
    pos: usize,
}

impl NodeDecoder<'_> {
    /// Feeds one token and returns logits for the next.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        if self.pos >= MAX_NODE_LEN {
            return Err(Error::PrefixTooLong {
                len: self.pos + 1,
                max: MAX_NODE_LEN,
            });
        }
        let p = &self.m.params;
        let x = embed_sum(p, &[(self.m.tok, token), (self.m.pos, self.pos)]);
        let x = Mat::from_vec(1, x.len(), x);
        let h = self.m.stack.step(p, &x, &mut self.caches, Some(&self.cond));
        self.pos += 1;
        Ok(self.m.head.apply(p, &h).data)
    }
}
