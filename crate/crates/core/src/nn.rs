//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices, plus an Adam optimizer and a finite-difference gradient check.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape mismatch");
        Mat { rows, cols, data }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|a| *a *= s);
    }

    pub fn append_rows(&mut self, other: &Mat) {
        if self.rows == 0 {
            self.cols = other.cols;
        }
        assert_eq!(self.cols, other.cols);
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        let mut c = Mat::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut c);
        c
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization; returns `(y, xhat, inv_std)`.
pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, Mat, Vec<f64>) {
    let n = x.cols as f64;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv.push(is);
        for c in 0..x.cols {
            let h = (row[c] - mean) * is;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * g[c] + b[c];
        }
    }
    (y, xhat, inv)
}

/// Row-wise softmax over visible entries; hidden entries get probability 0.
pub fn masked_softmax(x: &Mat, mask: Option<&[bool]>) -> Mat {
    let mut p = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let vis = |c: usize| mask.is_none_or(|m| m[r * x.cols + c]);
        let max = (0..x.cols).filter(|&c| vis(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for c in 0..x.cols {
            if vis(c) {
                let e = (row[c] - max).exp();
                p.data[r * x.cols + c] = e;
                sum += e;
            }
        }
        p.row_mut(r).iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Params {
    pub fn add(&mut self, name: impl Into<String>, m: Mat) -> usize {
        self.names.push(name.into());
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.tensors[id]
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect()
    }
}

pub type Var = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Embed { table: usize, idx: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Mat, inv: Vec<f64> },
    Softmax(Var),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Mat },
}

/// Records a computation over matrices for one backward pass.
pub struct Tape<'p> {
    params: &'p Params,
    vals: Vec<Mat>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            params,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, v: Mat, op: Op) -> Var {
        self.vals.push(v);
        self.ops.push(op);
        self.vals.len() - 1
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.vals[v]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: usize) -> Var {
        let v = self.params.tensors[id].clone();
        self.push(v, Op::Param(id))
    }

    /// Rows `idx` of parameter table `table`.
    pub fn embed(&mut self, table: usize, idx: &[usize]) -> Var {
        let t = &self.params.tensors[table];
        let mut out = Mat::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            out,
            Op::Embed {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = &self.vals[src];
        let mut out = Mat::zeros(idx.len(), s.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(
            out,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        let n = if tb { vb.rows } else { vb.cols };
        let mut c = Mat::zeros(va.rows, n);
        gemm(1.0, va, false, vb, tb, 0.0, &mut c);
        self.push(c, Op::MatMul { a, b, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.vals[a].clone();
        v.add_assign(&self.vals[b]);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.vals[a].clone();
        let r = &self.vals[row];
        assert_eq!((r.rows, r.cols), (1, v.cols), "row shape");
        for i in 0..v.rows {
            v.row_mut(i).iter_mut().zip(&r.data).for_each(|(x, y)| *x += y);
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.vals[a].clone();
        v.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = &self.vals[a];
        let v = Mat::from_vec(src.rows, src.cols, src.data.iter().map(|&x| gelu(x)).collect());
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (y, xhat, inv) = layer_norm(&self.vals[x], &self.vals[g].data, &self.vals[b].data);
        self.push(y, Op::LayerNorm { x, g, b, xhat, inv })
    }

    /// Row-wise softmax restricted to `mask` (row-major, `true` = visible).
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let p = masked_softmax(&self.vals[a], mask);
        self.push(p, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = &self.vals[a];
        let mut v = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = &self.vals[a];
        let v = Mat::from_vec(len, src.cols, src.data[start * src.cols..(start + len) * src.cols].to_vec());
        self.push(v, Op::SliceRows { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.vals[parts[0]].rows;
        let cols: usize = parts.iter().map(|&p| self.vals[p].cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = &self.vals[p];
                v.row_mut(r)[off..off + src.cols].copy_from_slice(src.row(r));
                off += src.cols;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mut v = Mat::zeros(0, self.vals[parts[0]].cols);
        for &p in parts {
            v.append_rows(&self.vals[p]);
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Summed negative log-likelihood of `(row, class)` targets under a
    /// row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let probs = masked_softmax(&self.vals[logits], None);
        let loss: f64 = targets.iter().map(|&(r, c)| -probs.get(r, c).max(1e-300).ln()).sum();
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of `seed * out` with respect to every parameter tensor;
    /// `None` for parameters the computation never touched.
    pub fn backward(&self, out: Var, seed: f64) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.vals.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        let ov = &self.vals[out];
        grads[out] = Some(Mat::full(ov.rows, ov.cols, seed));

        fn acc(slot: &mut Option<Mat>, g: Mat) {
            match slot {
                Some(s) => s.add_assign(&g),
                None => *slot = Some(g),
            }
        }
        fn acc_with(slot: &mut Option<Mat>, rows: usize, cols: usize, f: impl FnOnce(&mut Mat)) {
            let m = slot.get_or_insert_with(|| Mat::zeros(rows, cols));
            f(m);
        }

        for v in (0..=out).rev() {
            let Some(g) = grads[v].take() else { continue };
            match &self.ops[v] {
                Op::Leaf => {}
                Op::Param(id) => acc(&mut pgrads[*id], g),
                Op::Embed { table, idx } => {
                    let t = &self.params.tensors[*table];
                    acc_with(&mut pgrads[*table], t.rows, t.cols, |m| {
                        for (r, &i) in idx.iter().enumerate() {
                            m.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Gather { src, idx } => {
                    let s = &self.vals[*src];
                    acc_with(&mut grads[*src], s.rows, s.cols, |m| {
                        for (r, &i) in idx.iter().enumerate() {
                            m.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::MatMul { a, b, tb } => {
                    let (va, vb) = (&self.vals[*a], &self.vals[*b]);
                    acc_with(&mut grads[*a], va.rows, va.cols, |m| gemm(1.0, &g, false, vb, !tb, 1.0, m));
                    if *tb {
                        acc_with(&mut grads[*b], vb.rows, vb.cols, |m| gemm(1.0, &g, true, va, false, 1.0, m));
                    } else {
                        acc_with(&mut grads[*b], vb.rows, vb.cols, |m| gemm(1.0, va, true, &g, false, 1.0, m));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads[*b], g.clone());
                    acc(&mut grads[*a], g);
                }
                Op::AddRow(a, row) => {
                    let mut rg = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        rg.data.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                    }
                    acc(&mut grads[*row], rg);
                    acc(&mut grads[*a], g);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale(*s);
                    acc(&mut grads[*a], g);
                }
                Op::Gelu(a) => {
                    let x = &self.vals[*a];
                    let mut g = g;
                    g.data.iter_mut().zip(&x.data).for_each(|(d, &x)| *d *= gelu_grad(x));
                    acc(&mut grads[*a], g);
                }
                Op::LayerNorm { x, g: gv, b, xhat, inv } => {
                    let gain = &self.vals[*gv].data;
                    let cols = xhat.cols;
                    let n = cols as f64;
                    let mut dx = Mat::zeros(xhat.rows, cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..xhat.rows {
                        let dy = g.row(r);
                        let h = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let dh = dy[c] * gain[c];
                            sum_d += dh;
                            sum_dh += dh * h[c];
                            dg.data[c] += dy[c] * h[c];
                            db.data[c] += dy[c];
                        }
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dh = dy[c] * gain[c];
                            out[c] = inv[r] / n * (n * dh - sum_d - h[c] * sum_dh);
                        }
                    }
                    acc(&mut grads[*x], dx);
                    acc(&mut grads[*gv], dg);
                    acc(&mut grads[*b], db);
                }
                Op::Softmax(a) => {
                    let p = &self.vals[v];
                    let mut dx = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(pr.iter().zip(gr))
                            .for_each(|(o, (p, g))| *o = p * (g - dot));
                    }
                    acc(&mut grads[*a], dx);
                }
                Op::SliceCols { a, start } => {
                    let src = &self.vals[*a];
                    let start = *start;
                    acc_with(&mut grads[*a], src.rows, src.cols, |m| {
                        for r in 0..g.rows {
                            m.row_mut(r)[start..start + g.cols]
                                .iter_mut()
                                .zip(g.row(r))
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::SliceRows { a, start } => {
                    let src = &self.vals[*a];
                    let off = start * src.cols;
                    acc_with(&mut grads[*a], src.rows, src.cols, |m| {
                        m.data[off..off + g.data.len()]
                            .iter_mut()
                            .zip(&g.data)
                            .for_each(|(x, y)| *x += y);
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.vals[p].cols;
                        let mut part = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(&mut grads[p], part);
                        off += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let src = &self.vals[p];
                        let n = src.data.len();
                        acc(
                            &mut grads[p],
                            Mat::from_vec(src.rows, src.cols, g.data[off..off + n].to_vec()),
                        );
                        off += n;
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.data[0];
                    let mut dl = Mat::zeros(probs.rows, probs.cols);
                    let mut counts = vec![0usize; probs.rows];
                    for &(r, c) in targets {
                        counts[r] += 1;
                        dl.data[r * probs.cols + c] -= s;
                    }
                    for (r, &k) in counts.iter().enumerate() {
                        if k > 0 {
                            let w = s * k as f64;
                            dl.row_mut(r).iter_mut().zip(probs.row(r)).for_each(|(d, p)| *d += w * p);
                        }
                    }
                    acc(&mut grads[*logits], dl);
                }
            }
        }
        pgrads
    }
}

/// Adds per-sample gradients into a dense accumulator.
pub fn accumulate(into: &mut [Mat], grads: Vec<Option<Mat>>) {
    for (dst, g) in into.iter_mut().zip(grads) {
        if let Some(g) = g {
            dst.add_assign(&g);
        }
    }
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Mat]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / b1t;
                let vh = v.data[i] / b2t;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Checks `n` randomly chosen weights. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`; `floor` keeps weights with vanishing
/// gradient from dividing by rounding noise.
pub fn grad_check(
    params: &Params,
    loss: impl Fn(&Params) -> (f64, Vec<Option<Mat>>),
    n: usize,
    h: f64,
    tol: f64,
    floor: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    let (_, analytic) = loss(params);
    let sizes: Vec<usize> = params.tensors.iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut work = params.clone();
    let mut report = GradCheck {
        checked: 0,
        passed: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..n {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let orig = work.tensors[tensor].data[flat];
        work.tensors[tensor].data[flat] = orig + h;
        let (lp, _) = loss(&work);
        work.tensors[tensor].data[flat] = orig - h;
        let (lm, _) = loss(&work);
        work.tensors[tensor].data[flat] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[tensor].as_ref().map_or(0.0, |g| g.data[flat]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel <= tol {
            report.passed += 1;
        }
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::randn(3, 4, 1.0, &mut rng);
        let b = Mat::randn(5, 4, 1.0, &mut rng);
        let mut c = Mat::zeros(3, 5);
        gemm(1.0, &a, false, &b, true, 0.0, &mut c);
        for i in 0..3 {
            for j in 0..5 {
                let naive: f64 = (0..4).map(|k| a.get(i, k) * b.get(j, k)).sum();
                assert!((c.get(i, j) - naive).abs() < 1e-12);
            }
        }
        let mut d = Mat::zeros(4, 4);
        gemm(1.0, &a, true, &a, false, 0.0, &mut d);
        for i in 0..4 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|k| a.get(k, i) * a.get(k, j)).sum();
                assert!((d.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_hidden_entries() {
        let x = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let p = masked_softmax(&x, Some(&[true, false, true]));
        assert_eq!(p.data[1], 0.0);
        let e = (2f64).exp();
        assert!((p.data[2] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::default();
        let w = params.add("w", Mat::randn(4, 6, 0.5, &mut rng));
        let emb = params.add("emb", Mat::randn(5, 4, 0.5, &mut rng));
        let g = params.add("g", Mat::randn(1, 6, 0.5, &mut rng));
        let b = params.add("b", Mat::randn(1, 6, 0.5, &mut rng));
        let k = params.add("k", Mat::randn(3, 6, 0.5, &mut rng));
        let mask: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
        let loss = |p: &Params| {
            let mut t = Tape::new(p);
            let x = t.embed(emb, &[0, 3, 3]);
            let wv = t.param(w);
            let h = t.matmul(x, wv);
            let gv = t.param(g);
            let bv = t.param(b);
            let h = t.layer_norm(h, gv, bv);
            let h = t.gelu(h);
            let h = t.add_row(h, bv);
            let kv = t.param(k);
            let s = t.matmul_t(h, kv);
            let s = t.scale(s, 0.7);
            let a = t.masked_softmax(s, Some(&mask));
            let o = t.matmul(a, kv);
            let left = t.slice_cols(o, 0, 2);
            let right = t.slice_cols(o, 2, 4);
            let o = t.concat_cols(&[right, left]);
            let o = t.add(o, h);
            let top = t.slice_rows(o, 0, 1);
            let o = t.concat_rows(&[o, top]);
            let o = t.gather(o, &[3, 1, 1, 2]);
            let l = t.cross_entropy(o, &[(0, 1), (1, 5), (2, 5), (3, 0)]);
            let val = t.value(l).data[0];
            (val, t.backward(l, 1.0))
        };
        let report = grad_check(&params, loss, 200, 1e-5, 1e-4, 1e-7, &mut rng);
        assert_eq!(report.passed, report.checked, "{report:?}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = Params::default();
        let x = params.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&params, 0.1);
        for _ in 0..500 {
            let g = params.get(x).clone();
            opt.step(&mut params, &[g]);
        }
        assert!(params.get(x).data.iter().all(|v| v.abs() < 1e-2));
    }
}
