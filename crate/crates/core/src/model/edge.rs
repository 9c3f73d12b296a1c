use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{embed_sum, CondMlp, KvCache, Linear, Stack};
use super::{embedding, Dims, SeqModel, TrainSample};
use crate::error::{Error, Result};
use crate::graph::{SlotKind, SlotRef};
use crate::nn::{gemm, Mat, Params, Tape, Var};
use crate::ops::OpLibrary;
use crate::tokenizer::{EDGE_START, MAX_EDGE_LEN, MAX_NODES};

/// Pointer decoder over the slot list. Slot rows attend to each other;
/// edge-token rows attend to all slots and causally to earlier tokens. The
/// head scores every slot plus a learned END key.
#[derive(Clone, Debug)]
pub struct EdgeModel {
    pub dims: Dims,
    pub params: Params,
    kind: usize,
    index: usize,
    owner_type: usize,
    owner_ordinal: usize,
    segment: usize,
    start: usize,
    pos: usize,
    end_key: usize,
    cond: CondMlp,
    stack: Stack,
    query: Linear,
    key: Linear,
}

fn slot_ids(slots: &[SlotRef], types: &[usize]) -> [Vec<usize>; 4] {
    let mut ids: [Vec<usize>; 4] = Default::default();
    for s in slots {
        ids[0].push(match s.kind {
            SlotKind::Output => 0,
            SlotKind::Input => 1,
        });
        ids[1].push(s.index);
        ids[2].push(types[s.node]);
        ids[3].push(s.node);
    }
    ids
}

impl EdgeModel {
    pub fn new(dims: Dims, lib: &OpLibrary, cond_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let d = dims.hidden;
        let max_index = lib.max_inputs().max(1);
        EdgeModel {
            kind: embedding(&mut p, "edge.kind", 2, d, &mut rng),
            index: embedding(&mut p, "edge.index", max_index, d, &mut rng),
            owner_type: embedding(&mut p, "edge.type", lib.len(), d, &mut rng),
            owner_ordinal: embedding(&mut p, "edge.ordinal", MAX_NODES, d, &mut rng),
            segment: embedding(&mut p, "edge.segment", 1, d, &mut rng),
            start: embedding(&mut p, "edge.start", 1, d, &mut rng),
            pos: embedding(&mut p, "edge.pos", MAX_EDGE_LEN, d, &mut rng),
            end_key: embedding(&mut p, "edge.end", 1, d, &mut rng),
            cond: CondMlp::new(&mut p, "edge.cond", cond_dim, d, &mut rng),
            stack: Stack::new(&mut p, "edge.blk", d, dims.layers, dims.heads, &mut rng),
            query: Linear::new(&mut p, "edge.query", d, d, &mut rng),
            key: Linear::new(&mut p, "edge.key", d, d, &mut rng),
            dims,
            params: p,
        }
    }

    fn check(&self, slots: &[SlotRef], inputs: &[usize]) -> Result<()> {
        if slots.is_empty() {
            return Err(Error::EmptySlotList);
        }
        if inputs.len() > MAX_EDGE_LEN {
            return Err(Error::PrefixTooLong {
                len: inputs.len(),
                max: MAX_EDGE_LEN,
            });
        }
        if inputs.first() != Some(&EDGE_START) {
            return Err(Error::MalformedSequence {
                stream: "edge",
                offset: 0,
                reason: "prefix must begin with START".into(),
            });
        }
        if let Some(i) = inputs[1..].iter().position(|&p| p >= slots.len()) {
            return Err(Error::PointerOutOfRange {
                pointer: inputs[i + 1],
                offset: i + 1,
                len: slots.len(),
            });
        }
        Ok(())
    }

    /// Pointer logits for every prefix of `inputs`: `len x (|slots| + 1)`,
    /// the last column scoring END.
    pub fn forward(&self, t: &mut Tape, types: &[usize], slots: &[SlotRef], inputs: &[usize], cond: &[f64]) -> Result<Var> {
        self.check(slots, inputs)?;
        let (s, l) = (slots.len(), inputs.len());
        let ids = slot_ids(slots, types);
        let mut feat = t.embed(self.kind, &ids[0]);
        for (table, idx) in [(self.index, &ids[1]), (self.owner_type, &ids[2]), (self.owner_ordinal, &ids[3])] {
            let e = t.embed(table, idx);
            feat = t.add(feat, e);
        }
        let seg = t.param(self.segment);
        let slot_rows = t.add_row(feat, seg);
        let start = t.param(self.start);
        let tok = if l > 1 {
            let ptr = t.gather(feat, &inputs[1..]);
            t.concat_rows(&[start, ptr])
        } else {
            start
        };
        let positions: Vec<usize> = (0..l).collect();
        let pe = t.embed(self.pos, &positions);
        let tok = t.add(tok, pe);
        let x = t.concat_rows(&[slot_rows, tok]);
        let n = s + l;
        let mask: Vec<bool> = (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                c < s || (r >= s && c <= r)
            })
            .collect();
        let cv = self.cond.forward(t, cond);
        let h = self.stack.forward(t, x, Some(&mask), Some(cv));
        let hs = t.slice_rows(h, 0, s);
        let ht = t.slice_rows(h, s, l);
        let end = t.param(self.end_key);
        let keys = t.concat_rows(&[hs, end]);
        let k = self.key.forward(t, keys);
        let q = self.query.forward(t, ht);
        let logits = t.matmul_t(q, k);
        Ok(t.scale(logits, 1.0 / (self.dims.hidden as f64).sqrt()))
    }

    pub fn decoder(&self, types: &[usize], slots: &[SlotRef], cond: &[f64]) -> Result<EdgeDecoder<'_>> {
        self.check(slots, &[EDGE_START])?;
        let p = &self.params;
        let ids = slot_ids(slots, types);
        let d = self.dims.hidden;
        let mut feat = Mat::zeros(slots.len(), d);
        for i in 0..slots.len() {
            let row = embed_sum(
                p,
                &[
                    (self.kind, ids[0][i]),
                    (self.index, ids[1][i]),
                    (self.owner_type, ids[2][i]),
                    (self.owner_ordinal, ids[3][i]),
                ],
            );
            feat.row_mut(i).copy_from_slice(&row);
        }
        let mut x = feat.clone();
        for r in 0..x.rows {
            x.row_mut(r).iter_mut().zip(&p.get(self.segment).data).for_each(|(a, b)| *a += b);
        }
        let cond = self.cond.apply(p, cond);
        let mut caches = self.stack.new_caches();
        let mut hs = self.stack.step(p, &x, &mut caches, Some(&cond));
        hs.append_rows(p.get(self.end_key));
        let keys = self.key.apply(p, &hs);
        Ok(EdgeDecoder {
            m: self,
            feat,
            keys,
            caches,
            cond,
            pos: 0,
        })
    }
}

impl SeqModel for EdgeModel {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn sample_loss(&self, t: &mut Tape, s: &TrainSample, cond: &[f64], lib: &OpLibrary) -> Result<(Var, usize)> {
        let (types, slots) = s.structure(lib)?;
        let n = s.edge_seq.len();
        let logits = self.forward(t, &types, &slots, &s.edge_seq[..n - 1], cond)?;
        let targets: Vec<(usize, usize)> = (0..n - 1)
            .map(|i| {
                let tok = s.edge_seq[i + 1];
                (i, if tok >= EDGE_START { slots.len() } else { tok })
            })
            .collect();
        Ok((t.cross_entropy(logits, &targets), targets.len()))
    }
}

pub struct EdgeDecoder<'m> {
    m: &'m EdgeModel,
    feat: Mat,
    keys: Mat,
    caches: Vec<KvCache>,
    cond: Vec<f64>,
    pos: usize,
}

impl EdgeDecoder<'_> {
    /// Feeds START or a slot pointer; returns logits over slots then END.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        if self.pos >= MAX_EDGE_LEN {
            return Err(Error::PrefixTooLong {
                len: self.pos + 1,
                max: MAX_EDGE_LEN,
            });
        }
        let p = &self.m.params;
        let d = self.m.dims.hidden;
        let mut x = if token == EDGE_START {
            p.get(self.m.start).data.clone()
        } else if token < self.feat.rows {
            self.feat.row(token).to_vec()
        } else {
            return Err(Error::PointerOutOfRange {
                pointer: token,
                offset: self.pos,
                len: self.feat.rows,
            });
        };
        x.iter_mut().zip(p.get(self.m.pos).row(self.pos)).for_each(|(a, b)| *a += b);
        let h = self.m.stack.step(p, &Mat::from_vec(1, d, x), &mut self.caches, Some(&self.cond));
        self.pos += 1;
        let q = self.m.query.apply(p, &h);
        let mut logits = Mat::zeros(1, self.keys.rows);
        gemm(1.0 / (d as f64).sqrt(), &q, false, &self.keys, true, 0.0, &mut logits);
        Ok(logits.data)
    }
}
