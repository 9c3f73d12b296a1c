//! Prompt embedding, image-space distances, candidate ranking and
//! perturbation-based parameter refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::{reachable_to_outputs, NodeGraph};
use crate::image::ImagePlane;
use crate::ops::{OpLibrary, ParamKind};
use crate::render::{render, RenderConfig};

pub const PROMPT_DIM: usize = 256;
pub const PROMPT_RES: usize = 128;
const HIST_BINS: usize = 32;

/// Fixed-width image descriptor: 8x8 RGB thumbnail, 32-bin luminance
/// histogram, per-channel mean and standard deviation; L2-normalized.
pub fn encode_prompt(image: &ImagePlane) -> Vec<f32> {
    let img = image.to_rgb();
    let img = if img.res == PROMPT_RES {
        img
    } else {
        img.resize_bilinear(PROMPT_RES)
    };
    let mut v: Vec<f64> = Vec::with_capacity(PROMPT_DIM);
    v.extend(img.downsample(8).data.iter().map(|&x| x as f64));
    let mut hist = [0f64; HIST_BINS];
    let luma = img.luminance();
    for &l in &luma.data {
        let bin = ((l.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
        hist[bin] += 1.0;
    }
    v.extend(hist.iter().map(|h| h / luma.data.len() as f64));
    let n = (img.res * img.res) as f64;
    for c in 0..3 {
        let mean = img.data.iter().skip(c).step_by(3).map(|&x| x as f64).sum::<f64>() / n;
        let var = img
            .data
            .iter()
            .skip(c)
            .step_by(3)
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        v.push(mean);
        v.push(var.sqrt());
    }
    v.resize(PROMPT_DIM, 0.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleMetricConfig {
    pub seed: u64,
    pub kernels: usize,
    pub gram_weight: f64,
    pub thumbnail_weight: f64,
    pub swd_directions: usize,
    /// Downsampling factors at which Gram statistics are taken.
    pub scales: Vec<usize>,
}

impl Default for StyleMetricConfig {
    fn default() -> Self {
        StyleMetricConfig {
            seed: 0x5717_1e,
            kernels: 16,
            gram_weight: 1.0,
            thumbnail_weight: 0.1,
            swd_directions: 64,
            scales: vec![1, 2, 4],
        }
    }
}

/// Seeded bank of 3x3x3 convolution kernels.
#[derive(Clone, Debug)]
pub struct StyleMetric {
    pub cfg: StyleMetricConfig,
    kernels: Vec<[f32; 27]>,
}

/// Per-image statistics compared by [`StyleMetric::distance`].
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatures {
    grams: Vec<Vec<f64>>,
    thumbnail: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StyleBreakdown {
    pub gram: f64,
    pub thumbnail: f64,
    pub total: f64,
}

impl StyleMetric {
    pub fn new(cfg: StyleMetricConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / 27f32.sqrt();
        let kernels = (0..cfg.kernels)
            .map(|_| {
                let mut k = [0f32; 27];
                for w in &mut k {
                    let z: f32 = rng.sample(StandardNormal);
                    *w = z * scale;
                }
                k
            })
            .collect();
        StyleMetric { cfg, kernels }
    }

    fn gram(&self, img: &ImagePlane) -> Vec<f64> {
        let k = self.kernels.len();
        let mut gram = vec![0f64; k * k];
        let mut feat = vec![0f64; k];
        let r = img.res as isize;
        for y in 0..r {
            for x in 0..r {
                let mut patch = [0f32; 27];
                let mut i = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        for c in 0..3 {
                            patch[i] = img.get_wrap(x + dx, y + dy, c);
                            i += 1;
                        }
                    }
                }
                for (f, kern) in feat.iter_mut().zip(&self.kernels) {
                    let s: f32 = kern.iter().zip(&patch).map(|(w, p)| w * p).sum();
                    *f = s.max(0.0) as f64;
                }
                for a in 0..k {
                    for b in 0..k {
                        gram[a * k + b] += feat[a] * feat[b];
                    }
                }
            }
        }
        let n = (r * r) as f64;
        gram.iter_mut().for_each(|g| *g /= n);
        gram
    }

    pub fn features(&self, image: &ImagePlane) -> StyleFeatures {
        let img = image.to_rgb();
        let grams = self
            .cfg
            .scales
            .iter()
            .map(|&s| {
                let res = (img.res / s).max(1);
                if res == img.res {
                    self.gram(&img)
                } else {
                    self.gram(&img.downsample(res))
                }
            })
            .collect();
        StyleFeatures {
            grams,
            thumbnail: img.downsample(16).data,
        }
    }

    pub fn breakdown(&self, a: &StyleFeatures, b: &StyleFeatures) -> StyleBreakdown {
        let gram = a
            .grams
            .iter()
            .zip(&b.grams)
            .map(|(ga, gb)| ga.iter().zip(gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ga.len() as f64)
            .sum::<f64>()
            / a.grams.len().max(1) as f64;
        let thumbnail = a
            .thumbnail
            .iter()
            .zip(&b.thumbnail)
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.thumbnail.len() as f64;
        let total = self.cfg.gram_weight * gram + self.cfg.thumbnail_weight * thumbnail;
        StyleBreakdown { gram, thumbnail, total }
    }

    pub fn distance(&self, a: &StyleFeatures, b: &StyleFeatures) -> f64 {
        self.breakdown(a, b).total
    }
}

impl Default for StyleMetric {
    fn default() -> Self {
        StyleMetric::new(StyleMetricConfig::default())
    }
}

/// Gram L1 plus weighted 16x16 thumbnail L1 (both mean-normalized).
pub fn style_distance(a: &ImagePlane, b: &ImagePlane, cfg: &StyleMetricConfig) -> f64 {
    let m = StyleMetric::new(cfg.clone());
    m.distance(&m.features(a), &m.features(b))
}

/// Sliced Wasserstein-1 distance between the pixel distributions of two
/// images, averaged over `n_directions` seeded random unit directions.
pub fn swd(a: &ImagePlane, b: &ImagePlane, n_directions: usize, seed: u64) -> f64 {
    let (a, b) = if a.channels == b.channels {
        (a.clone(), b.clone())
    } else {
        (a.to_rgb(), b.to_rgb())
    };
    let c = a.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_directions.max(1) {
        let mut dir: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|d| *d /= norm);
        let project = |img: &ImagePlane| {
            let mut p: Vec<f64> = img
                .data
                .chunks_exact(c)
                .map(|px| px.iter().zip(&dir).map(|(&x, d)| x as f64 * d).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (project(&a), project(&b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64;
    }
    total / n_directions.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub resolution: usize,
    pub seed: u64,
    pub render: RenderConfig,
    pub style: StyleMetricConfig,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            resolution: crate::eval::DEFAULT_RESOLUTION,
            seed: 0,
            render: RenderConfig::default(),
            style: StyleMetricConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub index: usize,
    pub style: f64,
    pub swd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub ranked: Vec<RankEntry>,
    pub excluded: Vec<(usize, String)>,
}

impl RankReport {
    pub fn top(&self, k: usize) -> &[RankEntry] {
        &self.ranked[..k.min(self.ranked.len())]
    }

    pub fn mean_top(&self, k: usize) -> f64 {
        let top = self.top(k);
        top.iter().map(|e| e.style).sum::<f64>() / top.len().max(1) as f64
    }
}

fn prompt_at(prompt: &ImagePlane, res: usize) -> ImagePlane {
    let p = prompt.to_rgb();
    if p.res == res {
        p
    } else {
        p.resize_bilinear(res)
    }
}

pub fn render_graph(g: &NodeGraph, lib: &OpLibrary, res: usize, seed: u64, cfg: &RenderConfig) -> Result<ImagePlane> {
    Ok(render(&evaluate(g, lib, res, seed)?, cfg))
}

/// Scores candidates against a prompt and sorts by style distance, then by
/// candidate index. Candidates that fail to evaluate are excluded.
pub fn rank(candidates: &[NodeGraph], prompt: &ImagePlane, lib: &OpLibrary, cfg: &RankConfig) -> RankReport {
    let metric = StyleMetric::new(cfg.style.clone());
    let target = prompt_at(prompt, cfg.resolution);
    let target_features = metric.features(&target);
    let scored: Vec<std::result::Result<RankEntry, (usize, String)>> = candidates
        .par_iter()
        .enumerate()
        .map(|(index, g)| {
            let img = render_graph(g, lib, cfg.resolution, cfg.seed, &cfg.render).map_err(|e| (index, e.to_string()))?;
            Ok(RankEntry {
                index,
                style: metric.distance(&metric.features(&img), &target_features),
                swd: swd(&img, &target, cfg.style.swd_directions, cfg.style.seed),
            })
        })
        .collect();
    let mut report = RankReport::default();
    for s in scored {
        match s {
            Ok(e) => report.ranked.push(e),
            Err(x) => report.excluded.push(x),
        }
    }
    report
        .ranked
        .sort_by(|a, b| a.style.total_cmp(&b.style).then(a.index.cmp(&b.index)));
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Initial Adam step in normalized parameter units.
    pub learning_rate: f64,
    /// Ratio of the final to the initial step size.
    pub lr_decay: f64,
    /// Perturbation half-width in normalized parameter units.
    pub perturbation: f64,
    pub render: RenderConfig,
    pub style: StyleMetricConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            iters: 200,
            resolution: 64,
            seed: 0,
            learning_rate: 0.02,
            lr_decay: 0.01,
            perturbation: 0.02,
            render: RenderConfig::default(),
            style: StyleMetricConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub graph: NodeGraph,
    pub initial_score: f64,
    pub best_score: f64,
    /// Best score seen after each iteration.
    pub history: Vec<f64>,
}

/// Location of one optimizable scalar: (node, param, element, lo, hi).
type Handle = (usize, usize, usize, f64, f64);

fn optimizable_handles(g: &NodeGraph, lib: &OpLibrary) -> Vec<Handle> {
    let live = reachable_to_outputs(g);
    let mut out = Vec::new();
    for node in g.nodes.iter().filter(|n| live.contains(&n.id)) {
        for (pi, schema) in lib.schema(node.type_id).params.iter().enumerate() {
            if !schema.optimizable || !matches!(schema.kind, ParamKind::Float | ParamKind::FloatVec(_)) {
                continue;
            }
            for e in 0..schema.scalar_count() {
                out.push((node.id, pi, e, schema.lo, schema.hi));
            }
        }
    }
    out
}

fn apply(g: &NodeGraph, handles: &[Handle], x: &[f64]) -> NodeGraph {
    let mut out = g.clone();
    for (&(n, p, e, lo, hi), &v) in handles.iter().zip(x) {
        out.nodes[n].params[p].scalars_mut()[e] = lo + v.clamp(0.0, 1.0) * (hi - lo);
    }
    out
}

/// Minimizes the style distance between the graph's render and `target`
/// over optimizable continuous parameters using simultaneous-perturbation
/// gradient estimates and Adam steps. Returns the best point visited.
pub fn optimize_params(
    g: &NodeGraph,
    target: &ImagePlane,
    lib: &OpLibrary,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    let handles = optimizable_handles(g, lib);
    if handles.is_empty() {
        return Err(Error::NoOptimizableParameters);
    }
    let metric = StyleMetric::new(cfg.style.clone());
    let target_features = metric.features(&prompt_at(target, cfg.resolution));
    let score = |x: &[f64]| -> Result<f64> {
        let img = render_graph(&apply(g, &handles, x), lib, cfg.resolution, cfg.seed, &cfg.render)?;
        Ok(metric.distance(&metric.features(&img), &target_features))
    };

    let x0: Vec<f64> = handles
        .iter()
        .map(|&(n, p, e, lo, hi)| (g.nodes[n].params[p].scalars()[e] - lo) / (hi - lo))
        .collect();
    let initial_score = score(&x0)?;
    let mut best = (initial_score, x0.clone());
    let mut x = x0;
    let d = x.len();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5b5a);
    let mut history = Vec::with_capacity(cfg.iters);

    for k in 0..cfg.iters {
        let frac = k as f64 / cfg.iters.max(1) as f64;
        let lr = cfg.learning_rate * cfg.lr_decay.powf(frac);
        let c = cfg.perturbation;
        let delta: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let plus: Vec<f64> = x.iter().zip(&delta).map(|(a, s)| (a + c * s).clamp(0.0, 1.0)).collect();
        let minus: Vec<f64> = x.iter().zip(&delta).map(|(a, s)| (a - c * s).clamp(0.0, 1.0)).collect();
        let (yp, ym) = rayon::join(|| score(&plus), || score(&minus));
        let (yp, ym) = (yp?, ym?);
        for (y, p) in [(yp, &plus), (ym, &minus)] {
            if y < best.0 {
                best = (y, p.clone());
            }
        }
        let t = (k + 1) as i32;
        for i in 0..d {
            let span = plus[i] - minus[i];
            let grad = if span.abs() > 1e-12 { (yp - ym) / span } else { 0.0 };
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
            let mh = m[i] / (1.0 - beta1.powi(t));
            let vh = v[i] / (1.0 - beta2.powi(t));
            x[i] = (x[i] - lr * mh / (vh.sqrt() + eps)).clamp(0.0, 1.0);
        }
        let y = score(&x)?;
        if y < best.0 {
            best = (y, x.clone());
        }
        history.push(best.0);
    }

    let graph = if best.0 < initial_score {
        apply(g, &handles, &best.1)
    } else {
        g.clone()
    };
    Ok(OptimizeResult {
        graph,
        initial_score,
        best_score: best.0.min(initial_score),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ParamValue;

    fn lib() -> &'static OpLibrary {
        OpLibrary::standard()
    }

    fn random_image(res: usize, channels: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(res, channels, |_, _, p| p.iter_mut().for_each(|v| *v = rng.random()))
    }

    #[test]
    fn prompt_of_constant_gray() {
        let img = ImagePlane::constant(64, &[0.5, 0.5, 0.5]);
        let e = encode_prompt(&img);
        assert_eq!(e.len(), PROMPT_DIM);
        let norm: f64 = e.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e[..192].iter().all(|&x| x == e[0]));
        let hist = &e[192..224];
        assert_eq!(hist.iter().filter(|&&h| h > 0.0).count(), 1);
        for c in 0..3 {
            assert_eq!(e[224 + 2 * c + 1], 0.0);
        }
        assert_eq!(encode_prompt(&img), e);
    }

    #[test]
    fn prompt_norm_on_random_images() {
        for s in 0..5 {
            let e = encode_prompt(&random_image(40, 3, s));
            let norm: f64 = e.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn style_distance_basics() {
        let cfg = StyleMetricConfig::default();
        let a = random_image(32, 3, 1);
        let b = random_image(32, 3, 2);
        assert_eq!(style_distance(&a, &a, &cfg), 0.0);
        assert_eq!(style_distance(&a, &b, &cfg), style_distance(&b, &a, &cfg));
        assert!(style_distance(&a, &b, &cfg) > 0.0);

        let m = StyleMetric::new(cfg);
        let black = m.features(&ImagePlane::constant(32, &[0.0; 3]));
        let white = m.features(&ImagePlane::constant(32, &[1.0; 3]));
        let br = m.breakdown(&black, &white);
        assert!((0.1 * br.thumbnail - 0.1).abs() < 1e-12);
    }

    /// Wasserstein-1 between two equal-size empirical samples.
    fn w1(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn swd_matches_one_dimensional_oracle() {
        for s in 0..20 {
            let a = random_image(8, 1, s);
            let b = random_image(8, 1, 1000 + s);
            let av: Vec<f64> = a.data.iter().map(|&x| x as f64).collect();
            let bv: Vec<f64> = b.data.iter().map(|&x| x as f64).collect();
            assert!((swd(&a, &b, 7, s) - w1(&av, &bv)).abs() < 1e-6);
        }
    }

    #[test]
    fn swd_is_permutation_invariant_and_symmetric() {
        let a = random_image(8, 3, 4);
        let mut b = a.clone();
        let n = b.data.len() / 3;
        for i in 0..n / 2 {
            for c in 0..3 {
                b.data.swap(3 * i + c, 3 * (n - 1 - i) + c);
            }
        }
        assert!(swd(&a, &b, 16, 1).abs() < 1e-12);
        let c = random_image(8, 3, 5);
        assert_eq!(swd(&a, &c, 16, 1), swd(&c, &a, 16, 1));
    }

    fn color_graph(c: [f64; 3]) -> NodeGraph {
        let lib = lib();
        let mut g = NodeGraph::new();
        let u = g.add_node(lib, lib.id("uniform_color"), vec![ParamValue::Vector(c.to_vec())]);
        let o = g.add(lib, "output_albedo");
        g.connect(u, 0, o, 0);
        g
    }

    #[test]
    fn rank_orders_identical_candidate_first() {
        let lib = lib();
        let cfg = RankConfig {
            resolution: 32,
            ..RankConfig::default()
        };
        let target = color_graph([0.2, 0.5, 0.7]);
        let prompt = render_graph(&target, lib, 32, 0, &cfg.render).unwrap();
        let cands = vec![color_graph([0.9, 0.1, 0.1]), target.clone(), color_graph([0.3, 0.5, 0.6])];
        let report = rank(&cands, &prompt, lib, &cfg);
        assert_eq!(report.ranked[0].index, 1);
        assert_eq!(report.ranked[0].style, 0.0);
        let mut rev = cands.clone();
        rev.reverse();
        let mut s1: Vec<f64> = report.ranked.iter().map(|e| e.style).collect();
        let mut s2: Vec<f64> = rank(&rev, &prompt, lib, &cfg).ranked.iter().map(|e| e.style).collect();
        s1.sort_by(f64::total_cmp);
        s2.sort_by(f64::total_cmp);
        assert_eq!(s1, s2);
    }

    #[test]
    fn optimize_recovers_uniform_color() {
        let lib = lib();
        let cfg = OptimizeConfig {
            resolution: 16,
            ..OptimizeConfig::default()
        };
        let truth = [0.3, 0.5, 0.4];
        let target = render_graph(&color_graph(truth), lib, 16, 0, &cfg.render).unwrap();
        let start = color_graph([0.5, 0.7, 0.6]);
        let res = optimize_params(&start, &target, lib, &cfg).unwrap();
        assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.best_score <= res.initial_score);
        let got = res.graph.nodes[0].params[0].scalars().to_vec();
        for (g, t) in got.iter().zip(truth) {
            assert!((g - t).abs() <= 1.0 / 254.0, "{got:?}");
        }
    }

    #[test]
    fn optimize_at_optimum_keeps_graph() {
        let lib = lib();
        let cfg = OptimizeConfig {
            resolution: 16,
            iters: 10,
            ..OptimizeConfig::default()
        };
        let g = color_graph([0.3, 0.5, 0.4]);
        let target = render_graph(&g, lib, 16, 0, &cfg.render).unwrap();
        let res = optimize_params(&g, &target, lib, &cfg).unwrap();
        assert_eq!(res.best_score, 0.0);
        assert_eq!(res.graph, g);
    }

    #[test]
    fn optimize_without_parameters_fails() {
        let lib = lib();
        let mut g = NodeGraph::new();
        let c = g.add(lib, "checker");
        let o = g.add(lib, "output_roughness");
        g.connect(c, 0, o, 0);
        let target = ImagePlane::constant(16, &[0.5; 3]);
        let err = optimize_params(&g, &target, lib, &OptimizeConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "no-optimizable-parameters");
    }
}
