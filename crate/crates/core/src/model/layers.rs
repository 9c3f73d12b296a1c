use rand::Rng;

use crate::nn::{gelu, gemm, layer_norm, masked_softmax, Mat, Params, Tape, Var};

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (din as f64).sqrt();
        Linear {
            w: p.add(format!("{name}.w"), Mat::randn(din, dout, std, rng)),
            b: p.add(format!("{name}.b"), Mat::zeros(1, dout)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    pub fn apply(&self, p: &Params, x: &Mat) -> Mat {
        let w = p.get(self.w);
        let mut y = Mat::zeros(x.rows, w.cols);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&p.get(self.b).data);
        }
        gemm(1.0, x, false, w, false, 1.0, &mut y);
        y
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub g: usize,
    pub b: usize,
}

impl Norm {
    pub fn new(p: &mut Params, name: &str, d: usize) -> Self {
        Norm {
            g: p.add(format!("{name}.g"), Mat::full(1, d, 1.0)),
            b: p.add(format!("{name}.b"), Mat::zeros(1, d)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.g);
        let b = t.param(self.b);
        t.layer_norm(x, g, b)
    }

    pub fn apply(&self, p: &Params, x: &Mat) -> Mat {
        layer_norm(x, &p.get(self.g).data, &p.get(self.b).data).0
    }
}

/// Keys and values of every row seen so far by one block.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub k: Mat,
    pub v: Mat,
}

impl Default for KvCache {
    fn default() -> Self {
        Self::new()
    }
}

impl KvCache {
    pub fn new() -> Self {
        KvCache {
            k: Mat::zeros(0, 0),
            v: Mat::zeros(0, 0),
        }
    }
}

/// Post-norm transformer block: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub d: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

impl Block {
    pub fn new(p: &mut Params, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(d % heads, 0, "hidden size must be divisible by heads");
        Block {
            d,
            heads,
            q: Linear::new(p, &format!("{name}.q"), d, d, rng),
            k: Linear::new(p, &format!("{name}.k"), d, d, rng),
            v: Linear::new(p, &format!("{name}.v"), d, d, rng),
            o: Linear::new(p, &format!("{name}.o"), d, d, rng),
            ln1: Norm::new(p, &format!("{name}.ln1"), d),
            ff1: Linear::new(p, &format!("{name}.ff1"), d, 4 * d, rng),
            ff2: Linear::new(p, &format!("{name}.ff2"), 4 * d, d, rng),
            ln2: Norm::new(p, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: Option<&[bool]>) -> Var {
        let dh = self.d / self.heads;
        let q = self.q.forward(t, x);
        let k = self.k.forward(t, x);
        let v = self.v.forward(t, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let s = t.matmul_t(qh, kh);
            let s = t.scale(s, 1.0 / (dh as f64).sqrt());
            let a = t.masked_softmax(s, mask);
            outs.push(t.matmul(a, vh));
        }
        let cat = t.concat_cols(&outs);
        let att = self.o.forward(t, cat);
        let x = t.add(x, att);
        let x = self.ln1.forward(t, x);
        let f = self.ff1.forward(t, x);
        let f = t.gelu(f);
        let f = self.ff2.forward(t, f);
        let x = t.add(x, f);
        self.ln2.forward(t, x)
    }

    /// Processes new rows that attend to every cached row and to each other.
    pub fn step(&self, p: &Params, x: &Mat, cache: &mut KvCache) -> Mat {
        let dh = self.d / self.heads;
        let q = self.q.apply(p, x);
        cache.k.append_rows(&self.k.apply(p, x));
        cache.v.append_rows(&self.v.apply(p, x));
        let n = cache.k.rows;
        let mut cat = Mat::zeros(x.rows, self.d);
        let slice = |m: &Mat, h: usize| {
            let mut s = Mat::zeros(m.rows, dh);
            for r in 0..m.rows {
                s.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
            }
            s
        };
        for h in 0..self.heads {
            let (qh, kh, vh) = (slice(&q, h), slice(&cache.k, h), slice(&cache.v, h));
            let mut s = Mat::zeros(x.rows, n);
            gemm(1.0, &qh, false, &kh, true, 0.0, &mut s);
            s.scale(1.0 / (dh as f64).sqrt());
            let a = masked_softmax(&s, None);
            let o = a.matmul(&vh);
            for r in 0..x.rows {
                cat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
            }
        }
        let mut y = self.o.apply(p, &cat);
        y.add_assign(x);
        let y = self.ln1.apply(p, &y);
        let mut f = self.ff1.apply(p, &y);
        f.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut f = self.ff2.apply(p, &f);
        f.add_assign(&y);
        self.ln2.apply(p, &f)
    }
}

/// Two-layer perceptron mapping a condition vector to a hidden-size row.
/// The output layer starts small so the condition enters as a mild offset.
#[derive(Clone, Copy, Debug)]
pub struct CondMlp {
    l1: Linear,
    l2: Linear,
}

impl CondMlp {
    pub fn new(p: &mut Params, name: &str, cond_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        let l1 = Linear::new(p, &format!("{name}.1"), cond_dim, d, rng);
        let std = 0.1 / (d as f64).sqrt();
        let l2 = Linear {
            w: p.add(format!("{name}.2.w"), Mat::randn(d, d, std, rng)),
            b: p.add(format!("{name}.2.b"), Mat::zeros(1, d)),
        };
        CondMlp { l1, l2 }
    }

    pub fn forward(&self, t: &mut Tape, cond: &[f64]) -> Var {
        let c = t.constant(Mat::from_vec(1, cond.len(), cond.to_vec()));
        let h = self.l1.forward(t, c);
        let h = t.gelu(h);
        self.l2.forward(t, h)
    }

    pub fn apply(&self, p: &Params, cond: &[f64]) -> Vec<f64> {
        let c = Mat::from_vec(1, cond.len(), cond.to_vec());
        let mut h = self.l1.apply(p, &c);
        h.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.l2.apply(p, &h).data
    }
}

/// Blocks with the mapped condition added to each block's output.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

impl Stack {
    pub fn new(p: &mut Params, name: &str, d: usize, layers: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Stack {
            blocks: (0..layers)
                .map(|l| Block::new(p, &format!("{name}.{l}"), d, heads, rng))
                .collect(),
        }
    }

    pub fn forward(&self, t: &mut Tape, mut x: Var, mask: Option<&[bool]>, cond: Option<Var>) -> Var {
        for b in &self.blocks {
            x = b.forward(t, x, mask);
            if let Some(c) = cond {
                x = t.add_row(x, c);
            }
        }
        x
    }

    pub fn new_caches(&self) -> Vec<KvCache> {
        self.blocks.iter().map(|_| KvCache::new()).collect()
    }

    pub fn step(&self, p: &Params, x: &Mat, caches: &mut [KvCache], cond: Option<&[f64]>) -> Mat {
        let mut x = x.clone();
        for (b, cache) in self.blocks.iter().zip(caches) {
            x = b.step(p, &x, cache);
            if let Some(c) = cond {
                for r in 0..x.rows {
                    x.row_mut(r).iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
            }
        }
        x
    }
}

pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Sums rows of several embedding tables (plain evaluation).
pub fn embed_sum(p: &Params, lookups: &[(usize, usize)]) -> Vec<f64> {
    let mut out = vec![0.0; p.get(lookups[0].0).cols];
    for &(table, row) in lookups {
        out.iter_mut().zip(p.get(table).row(row)).for_each(|(a, b)| *a += b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn incremental_steps_match_causal_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::default();
        let stack = Stack::new(&mut p, "s", 8, 2, 2, &mut rng);
        let x = Mat::randn(5, 8, 1.0, &mut rng);
        let cond = vec![0.3; 8];
        let mut t = Tape::new(&p);
        let xv = t.constant(x.clone());
        let cv = t.constant(Mat::from_vec(1, 8, cond.clone()));
        let mask = causal_mask(5);
        let full = stack.forward(&mut t, xv, Some(&mask), Some(cv));
        let mut caches = stack.new_caches();
        for r in 0..5 {
            let row = Mat::from_vec(1, 8, x.row(r).to_vec());
            let y = stack.step(&p, &row, &mut caches, Some(&cond));
            for (a, b) in y.data.iter().zip(t.value(full).row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
