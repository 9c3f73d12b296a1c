use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{CondMlp, KvCache, Linear, Stack};
use super::{embedding, Dims, SeqModel, TrainSample};
use crate::error::{Error, Result};
use crate::nn::{gelu, Mat, Params, Tape, Var};
use crate::ops::OpLibrary;
use crate::tokenizer::{max_param_len, param_layout, MAX_NODES, NODE_MARK, PARAM_END, PARAM_START, PARAM_VOCAB};

/// Per-position schema lookups for a node-type sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlots {
    /// Node ordinal per token, the node count for START/END.
    pub ordinal: Vec<usize>,
    /// Library-wide parameter id; `total_params` for structural tokens.
    pub gid: Vec<usize>,
    pub element: Vec<usize>,
    pub kind: Vec<usize>,
}

impl ParamSlots {
    pub fn new(types: &[usize], lib: &OpLibrary) -> Self {
        let special = lib.max_params();
        let mut s = ParamSlots {
            ordinal: Vec::new(),
            gid: Vec::new(),
            element: Vec::new(),
            kind: Vec::new(),
        };
        for (ord, pi, e, kind) in param_layout(types, lib) {
            s.ordinal.push(if ord == MAX_NODES { types.len() } else { ord });
            s.gid.push(if pi == special {
                lib.total_params()
            } else {
                lib.global_param_index(types[ord], pi)
            });
            s.element.push(e);
            s.kind.push(kind);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kind.is_empty()
    }

    /// Token forced at position `i`, if the position is structural.
    pub fn forced(&self, i: usize) -> Option<usize> {
        match self.kind[i] {
            k if k < 4 => None,
            4 => Some(NODE_MARK),
            5 => Some(PARAM_START),
            _ => Some(PARAM_END),
        }
    }
}

/// Row-normalized `A + I` of the undirected graph.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Mat> {
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        a.data[i * n + i] = 1.0;
    }
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::InconsistentEdges(format!("edge ({u}, {v}) with {n} nodes")));
        }
        if u == v {
            return Err(Error::InconsistentEdges(format!("self loop on node {u}")));
        }
        a.data[u * n + v] = 1.0;
        a.data[v * n + u] = 1.0;
    }
    for r in 0..n {
        let s: f64 = a.row(r).iter().sum();
        a.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    Ok(a)
}

/// Parameter decoder. Node context combines a sequence encoder over node
/// types with a graph convolution over the decoded edges.
#[derive(Clone, Debug)]
pub struct ParamModel {
    pub dims: Dims,
    pub params: Params,
    gp_type: usize,
    gp_pos: usize,
    encoder: Stack,
    gcn_type: usize,
    gcn: Vec<Linear>,
    none: usize,
    val: usize,
    pos: usize,
    gid: usize,
    elem: usize,
    kind: usize,
    cond: CondMlp,
    stack: Stack,
    head: Linear,
}

impl ParamModel {
    pub fn new(dims: Dims, encoder_layers: usize, gcn_layers: usize, lib: &OpLibrary, cond_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let d = dims.hidden;
        let max_elem = lib
            .iter()
            .flat_map(|op| op.params.iter().map(|s| s.scalar_count()))
            .max()
            .unwrap_or(1);
        ParamModel {
            gp_type: embedding(&mut p, "param.gp_type", lib.len(), d, &mut rng),
            gp_pos: embedding(&mut p, "param.gp_pos", MAX_NODES, d, &mut rng),
            encoder: Stack::new(&mut p, "param.enc", d, encoder_layers, dims.heads, &mut rng),
            gcn_type: embedding(&mut p, "param.gcn_type", lib.len(), d, &mut rng),
            gcn: (0..gcn_layers)
                .map(|l| Linear::new(&mut p, &format!("param.gcn.{l}"), d, d, &mut rng))
                .collect(),
            none: embedding(&mut p, "param.none", 1, d, &mut rng),
            val: embedding(&mut p, "param.val", PARAM_VOCAB, d, &mut rng),
            pos: embedding(&mut p, "param.pos", max_param_len(lib), d, &mut rng),
            gid: embedding(&mut p, "param.gid", lib.total_params() + 1, d, &mut rng),
            elem: embedding(&mut p, "param.elem", max_elem, d, &mut rng),
            kind: embedding(&mut p, "param.kind", 7, d, &mut rng),
            cond: CondMlp::new(&mut p, "param.cond", cond_dim, d, &mut rng),
            stack: Stack::new(&mut p, "param.blk", d, dims.layers, dims.heads, &mut rng),
            head: Linear::new(&mut p, "param.head", d, PARAM_VOCAB, &mut rng),
            dims,
            params: p,
        }
    }

    fn check_types(types: &[usize]) -> Result<()> {
        if types.len() > MAX_NODES {
            return Err(Error::AlignmentMismatch(format!("{} nodes exceed {MAX_NODES}", types.len())));
        }
        Ok(())
    }

    /// Node context rows on the tape, plus the trailing "none" row.
    pub fn node_context(&self, t: &mut Tape, types: &[usize], edges: &[(usize, usize)]) -> Result<Var> {
        Self::check_types(types)?;
        let none = t.param(self.none);
        if types.is_empty() {
            return Ok(none);
        }
        let n = types.len();
        let adj = normalized_adjacency(n, edges)?;
        let positions: Vec<usize> = (0..n).collect();
        let e = t.embed(self.gp_type, types);
        let pe = t.embed(self.gp_pos, &positions);
        let x = t.add(e, pe);
        let enc = self.encoder.forward(t, x, None, None);
        let a = t.constant(adj);
        let mut h = t.embed(self.gcn_type, types);
        for layer in &self.gcn {
            let m = t.matmul(a, h);
            let m = layer.forward(t, m);
            let m = t.gelu(m);
            h = t.add(h, m);
        }
        let ctx = t.add(enc, h);
        Ok(t.concat_rows(&[ctx, none]))
    }

    /// Plain evaluation of [`ParamModel::node_context`].
    pub fn node_context_plain(&self, types: &[usize], edges: &[(usize, usize)]) -> Result<Mat> {
        Self::check_types(types)?;
        let p = &self.params;
        let d = self.dims.hidden;
        let none = p.get(self.none);
        if types.is_empty() {
            return Ok(none.clone());
        }
        let n = types.len();
        let adj = normalized_adjacency(n, edges)?;
        let mut x = Mat::zeros(n, d);
        let mut h = Mat::zeros(n, d);
        for (i, &ty) in types.iter().enumerate() {
            for c in 0..d {
                x.data[i * d + c] = p.get(self.gp_type).get(ty, c) + p.get(self.gp_pos).get(i, c);
                h.data[i * d + c] = p.get(self.gcn_type).get(ty, c);
            }
        }
        let mut caches = self.encoder.new_caches();
        let mut ctx = self.encoder.step(p, &x, &mut caches, None);
        ctx.add_assign(&self.convolve(&adj, h));
        ctx.append_rows(none);
        Ok(ctx)
    }

    fn convolve(&self, adj: &Mat, mut h: Mat) -> Mat {
        let p = &self.params;
        for layer in &self.gcn {
            let mut m = layer.apply(p, &adj.matmul(&h));
            m.data.iter_mut().for_each(|v| *v = gelu(*v));
            h.add_assign(&m);
        }
        h
    }

    /// Graph-convolution features alone, one row per node.
    pub fn gcn_features(&self, types: &[usize], edges: &[(usize, usize)]) -> Result<Mat> {
        Self::check_types(types)?;
        let adj = normalized_adjacency(types.len(), edges)?;
        let table = self.params.get(self.gcn_type);
        let mut h = Mat::zeros(0, self.dims.hidden);
        for &ty in types {
            h.append_rows(&Mat::from_vec(1, table.cols, table.row(ty).to_vec()));
        }
        Ok(self.convolve(&adj, h))
    }

    fn decoder_ids(slots: &ParamSlots, inputs: &[usize]) -> Result<()> {
        if inputs.len() >= slots.len() {
            return Err(Error::AlignmentMismatch(format!(
                "prefix of {} tokens for a sequence of {} positions",
                inputs.len(),
                slots.len()
            )));
        }
        for (i, &tok) in inputs.iter().enumerate() {
            let ok = match slots.forced(i) {
                Some(f) => tok == f,
                None => tok < PARAM_START,
            };
            if !ok {
                return Err(Error::AlignmentMismatch(format!("token {tok} at position {i}")));
            }
        }
        Ok(())
    }

    /// Logits over the parameter vocabulary for each prefix of `inputs`.
    pub fn forward(
        &self,
        t: &mut Tape,
        types: &[usize],
        edges: &[(usize, usize)],
        inputs: &[usize],
        cond: &[f64],
        lib: &OpLibrary,
    ) -> Result<Var> {
        let slots = ParamSlots::new(types, lib);
        Self::decoder_ids(&slots, inputs)?;
        let ctx = self.node_context(t, types, edges)?;
        let l = inputs.len();
        let positions: Vec<usize> = (0..l).collect();
        let mut x = t.embed(self.val, inputs);
        for (table, idx) in [
            (self.pos, &positions[..]),
            (self.gid, &slots.gid[1..=l]),
            (self.elem, &slots.element[1..=l]),
            (self.kind, &slots.kind[1..=l]),
        ] {
            let e = t.embed(table, idx);
            x = t.add(x, e);
        }
        let nc = t.gather(ctx, &slots.ordinal[1..=l]);
        let x = t.add(x, nc);
        let cv = self.cond.forward(t, cond);
        let mask = super::layers::causal_mask(l);
        let h = self.stack.forward(t, x, Some(&mask), Some(cv));
        Ok(self.head.forward(t, h))
    }

    pub fn decoder(&self, types: &[usize], edges: &[(usize, usize)], cond: &[f64], lib: &OpLibrary) -> Result<ParamDecoder<'_>> {
        Ok(ParamDecoder {
            m: self,
            ctx: self.node_context_plain(types, edges)?,
            slots: ParamSlots::new(types, lib),
            caches: self.stack.new_caches(),
            cond: self.cond.apply(&self.params, cond),
            pos: 0,
        })
    }
}

impl SeqModel for ParamModel {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn sample_loss(&self, t: &mut Tape, s: &TrainSample, cond: &[f64], lib: &OpLibrary) -> Result<(Var, usize)> {
        let (types, _) = s.structure(lib)?;
        let edges = s.ordinal_edges(lib)?;
        let slots = ParamSlots::new(&types, lib);
        let n = s.param_seq.len();
        if n != slots.len() {
            return Err(Error::AlignmentMismatch(format!(
                "{n} parameter tokens for {} positions",
                slots.len()
            )));
        }
        let logits = self.forward(t, &types, &edges, &s.param_seq[..n - 1], cond, lib)?;
        let targets: Vec<(usize, usize)> = (0..n - 1)
            .filter(|&i| slots.kind[i + 1] < 4)
            .map(|i| (i, s.param_seq[i + 1]))
            .collect();
        Ok((t.cross_entropy(logits, &targets), targets.len()))
    }
}

pub struct ParamDecoder<'m> {
    m: &'m ParamModel,
    ctx: Mat,
    pub slots: ParamSlots,
    caches: Vec<KvCache>,
    cond: Vec<f64>,
    pos: usize,
}

impl ParamDecoder<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds the token at the current position; returns logits for the next.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let i = self.pos;
        if i + 1 >= self.slots.len() {
            return Err(Error::AlignmentMismatch(format!("no position after {i}")));
        }
        let ok = match self.slots.forced(i) {
            Some(f) => token == f,
            None => token < PARAM_START,
        };
        if !ok {
            return Err(Error::AlignmentMismatch(format!("token {token} at position {i}")));
        }
        let p = &self.m.params;
        let s = &self.slots;
        let mut x = p.get(self.m.val).row(token).to_vec();
        for (table, row) in [
            (self.m.pos, i),
            (self.m.gid, s.gid[i + 1]),
            (self.m.elem, s.element[i + 1]),
            (self.m.kind, s.kind[i + 1]),
        ] {
            x.iter_mut().zip(p.get(table).row(row)).for_each(|(a, b)| *a += b);
        }
        x.iter_mut().zip(self.ctx.row(s.ordinal[i + 1])).for_each(|(a, b)| *a += b);
        let d = x.len();
        let h = self.m.stack.step(p, &Mat::from_vec(1, d, x), &mut self.caches, Some(&self.cond));
        self.pos += 1;
        Ok(self.m.head.apply(p, &h).data)
    }
}
