//! Operator evaluation and whole-graph evaluation into material maps.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{reachable_to_outputs, topological_order, NodeGraph};
use crate::image::ImagePlane;
use crate::noise;
use crate::ops::{OpCode, OpLibrary, OpSchema, ParamValue, Role};

/// Default evaluation resolution for corpus renders.
pub const DEFAULT_RESOLUTION: usize = 128;

/// Evaluated PBR maps. The normal map stores `0.5 * n + 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps {
    pub albedo: ImagePlane,
    pub normal: ImagePlane,
    pub roughness: ImagePlane,
    pub metallic: ImagePlane,
}

impl MaterialMaps {
    pub fn default_map(role: Role, res: usize) -> ImagePlane {
        match role {
            Role::Albedo => ImagePlane::constant(res, &[0.5, 0.5, 0.5]),
            Role::Normal => ImagePlane::constant(res, &[0.5, 0.5, 1.0]),
            Role::Roughness => ImagePlane::constant(res, &[0.5]),
            Role::Metallic => ImagePlane::constant(res, &[0.0]),
        }
    }

    pub fn get(&self, role: Role) -> &ImagePlane {
        match role {
            Role::Albedo => &self.albedo,
            Role::Normal => &self.normal,
            Role::Roughness => &self.roughness,
            Role::Metallic => &self.metallic,
        }
    }

    pub fn res(&self) -> usize {
        self.albedo.res
    }

    /// Mean over the four maps of their per-map MSE.
    pub fn mean_mse(&self, other: &MaterialMaps) -> f64 {
        Role::ALL
            .iter()
            .map(|&r| self.get(r).mse(other.get(r)))
            .sum::<f64>()
            / 4.0
    }

    /// Writes `<stem>_albedo.png` (gamma-encoded) and linear data maps.
    pub fn write_pngs(&self, stem: impl AsRef<Path>, gamma: f32) -> Result<()> {
        let stem = stem.as_ref().display().to_string();
        self.albedo.write_png(format!("{stem}_albedo.png"), Some(gamma))?;
        self.normal.write_png(format!("{stem}_normal.png"), None)?;
        self.roughness.write_png(format!("{stem}_roughness.png"), None)?;
        self.metallic.write_png(format!("{stem}_metallic.png"), None)
    }
}

/// Evaluation inputs shared by every node of a graph.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext {
    pub res: usize,
    pub seed: u64,
    /// Added to texture coordinates of generators (wrap addressing).
    pub phase: (f64, f64),
}

impl EvalContext {
    pub fn new(res: usize, seed: u64) -> Self {
        EvalContext {
            res,
            seed,
            phase: (0.0, 0.0),
        }
    }
}

/// Evaluates one operation on fully connected inputs. Output nodes return
/// their material map as a single plane.
pub fn eval_node(
    schema: &OpSchema,
    params: &[ParamValue],
    inputs: &[ImagePlane],
    res: usize,
    seed: u64,
) -> Result<Vec<ImagePlane>> {
    let refs: Vec<&ImagePlane> = inputs.iter().collect();
    eval_op(schema, params, &refs, &EvalContext::new(res, seed), usize::MAX)
}

fn scalar(params: &[ParamValue], i: usize) -> f64 {
    params[i].as_f64()
}

fn rgb(params: &[ParamValue], i: usize) -> [f32; 3] {
    let s = params[i].scalars();
    [s[0] as f32, s[1] as f32, s[2] as f32]
}

fn noise_seed(ctx: &EvalContext, schema: &OpSchema, seed_param: f64) -> u64 {
    noise::hash_combine(
        noise::hash_combine(ctx.seed, schema.type_id as u64),
        seed_param as u64,
    )
}

fn generator(ctx: &EvalContext, channels: usize, f: impl Fn(f64, f64, &mut [f32])) -> ImagePlane {
    let r = ctx.res as f64;
    ImagePlane::from_fn(ctx.res, channels, |x, y, out| {
        let u = ((x as f64 + 0.5) / r + ctx.phase.0).rem_euclid(1.0);
        let v = ((y as f64 + 0.5) / r + ctx.phase.1).rem_euclid(1.0);
        f(u, v, out)
    })
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn tri(t: f64) -> f64 {
    1.0 - (2.0 * t.rem_euclid(1.0) - 1.0).abs()
}

pub(crate) fn eval_op(
    schema: &OpSchema,
    params: &[ParamValue],
    inputs: &[&ImagePlane],
    ctx: &EvalContext,
    node: usize,
) -> Result<Vec<ImagePlane>> {
    for img in inputs {
        if img.res != ctx.res || !(img.channels == 1 || img.channels == 3) {
            return Err(Error::ChannelMismatch {
                node,
                channels: img.channels,
                reason: format!("{}x{} input at resolution {}", img.res, img.res, ctx.res),
            });
        }
    }
    let input = |i: usize| inputs[i];
    let out = match schema.code {
        OpCode::UniformColor => ImagePlane::constant(ctx.res, &rgb(params, 0)),
        OpCode::PerlinNoise => {
            let period = scalar(params, 0) as i64;
            let seed = noise_seed(ctx, schema, scalar(params, 1));
            generator(ctx, 1, |u, v, o| {
                o[0] = (0.5 + 0.5 * noise::perlin(u, v, period, seed)) as f32
            })
        }
        OpCode::FbmNoise => {
            let period = scalar(params, 0) as i64;
            let octaves = scalar(params, 1) as u32;
            let gain = scalar(params, 2);
            let seed = noise_seed(ctx, schema, scalar(params, 3));
            generator(ctx, 1, |u, v, o| {
                o[0] = (0.5 + 0.5 * noise::fbm(u, v, period, octaves, gain, seed)) as f32
            })
        }
        OpCode::Cells => {
            let period = scalar(params, 0) as i64;
            let jitter = scalar(params, 1);
            let seed = noise_seed(ctx, schema, scalar(params, 2));
            generator(ctx, 1, |u, v, o| {
                o[0] = (noise::cells(u, v, period, jitter, seed) * std::f64::consts::SQRT_2) as f32
            })
        }
        OpCode::Checker => {
            let n = 2.0 * scalar(params, 0);
            generator(ctx, 1, |u, v, o| {
                let i = (u * n).floor() as i64 + (v * n).floor() as i64;
                o[0] = (i.rem_euclid(2)) as f32
            })
        }
        OpCode::GradientLinear => {
            let theta = scalar(params, 0) * TAU;
            let (c2, s2) = (theta.cos().powi(2), theta.sin().powi(2));
            generator(ctx, 1, |u, v, o| o[0] = (c2 * tri(u) + s2 * tri(v)) as f32)
        }
        OpCode::Brick => {
            let rows = 2.0 * scalar(params, 0);
            let cols = scalar(params, 1);
            let mortar = scalar(params, 2) / rows;
            generator(ctx, 1, |u, v, o| {
                let row = (v * rows).floor();
                let shift = if (row as i64) % 2 == 1 { 0.5 } else { 0.0 };
                let bx = (u * cols + shift).rem_euclid(1.0);
                let by = (v * rows).rem_euclid(1.0);
                let dx = bx.min(1.0 - bx) / cols;
                let dy = by.min(1.0 - by) / rows;
                let d = dx.min(dy);
                o[0] = smoothstep(0.35 * mortar, 0.5 * mortar, d) as f32
            })
        }
        OpCode::Blend => {
            let mode = params[0].as_index();
            let opacity = scalar(params, 1) as f32;
            let channels = input(0).channels.max(input(1).channels);
            let fg = convert(input(0), channels, node)?;
            let bg = convert(input(1), channels, node)?;
            ImagePlane {
                res: ctx.res,
                channels,
                data: fg
                    .data
                    .iter()
                    .zip(&bg.data)
                    .map(|(&f, &b)| {
                        let mixed = match mode {
                            0 => f,
                            1 => f * b,
                            2 => f + b,
                            3 => b - f,
                            4 => f.max(b),
                            _ => f.min(b),
                        };
                        b + (mixed - b) * opacity
                    })
                    .collect(),
            }
        }
        OpCode::Levels => {
            let (in_lo, in_hi) = (scalar(params, 0), scalar(params, 1));
            let inv_gamma = 1.0 / scalar(params, 2);
            let (out_lo, out_hi) = (scalar(params, 3), scalar(params, 4));
            let mut span = in_hi - in_lo;
            if span.abs() < 1e-4 {
                span = 1e-4f64.copysign(span);
            }
            input(0).map(|v| {
                let t = ((v as f64 - in_lo) / span).clamp(0.0, 1.0).powf(inv_gamma);
                (out_lo + t * (out_hi - out_lo)) as f32
            })
        }
        OpCode::HslAdjust => {
            let (dh, ds, dl) = (scalar(params, 0), scalar(params, 1), scalar(params, 2));
            let src = input(0).to_rgb();
            let mut out = src.clone();
            for (o, p) in out.data.chunks_exact_mut(3).zip(src.data.chunks_exact(3)) {
                let (h, s, l) = rgb_to_hsl(p[0] as f64, p[1] as f64, p[2] as f64);
                let (r, g, b) = hsl_to_rgb(
                    (h + dh).rem_euclid(1.0),
                    (s + ds).clamp(0.0, 1.0),
                    (l + dl).clamp(0.0, 1.0),
                );
                o.copy_from_slice(&[r as f32, g as f32, b as f32]);
            }
            out
        }
        OpCode::BlurGaussian => {
            let sigma = scalar(params, 0) * ctx.res as f64 / DEFAULT_RESOLUTION as f64;
            gaussian_blur(input(0), sigma)
        }
        OpCode::Transform2d => {
            let (sx, sy) = (scalar(params, 0), scalar(params, 1));
            let rot = scalar(params, 2) * TAU;
            let (ox, oy) = (scalar(params, 3), scalar(params, 4));
            let (cos, sin) = (rot.cos(), rot.sin());
            let src = input(0);
            let r = ctx.res as f64;
            ImagePlane::from_fn(ctx.res, src.channels, |x, y, out| {
                let px = (x as f64 + 0.5) / r - 0.5 - ox;
                let py = (y as f64 + 0.5) / r - 0.5 - oy;
                let qx = (cos * px + sin * py) / sx + 0.5;
                let qy = (-sin * px + cos * py) / sy + 0.5;
                for (c, o) in out.iter_mut().enumerate() {
                    *o = src.sample_wrap(qx, qy, c);
                }
            })
        }
        OpCode::DirectionalWarp => {
            let intensity = scalar(params, 0);
            let angle = scalar(params, 1) * TAU;
            let (dx, dy) = (angle.cos() * intensity, angle.sin() * intensity);
            let src = input(0);
            let warp = input(1).luminance();
            let r = ctx.res as f64;
            ImagePlane::from_fn(ctx.res, src.channels, |x, y, out| {
                let w = warp.get(x, y, 0) as f64;
                let u = (x as f64 + 0.5) / r + dx * w;
                let v = (y as f64 + 0.5) / r + dy * w;
                for (c, o) in out.iter_mut().enumerate() {
                    *o = src.sample_wrap(u, v, c);
                }
            })
        }
        OpCode::Invert => input(0).map(|v| 1.0 - v),
        OpCode::Threshold => {
            let level = scalar(params, 0) as f32;
            input(0).luminance().map(|v| if v >= level { 1.0 } else { 0.0 })
        }
        OpCode::Colorize => {
            let (a, b) = (rgb(params, 0), rgb(params, 1));
            let gray = input(0).luminance();
            ImagePlane {
                res: ctx.res,
                channels: 3,
                data: gray
                    .data
                    .iter()
                    .flat_map(|&g| [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * g))
                    .collect(),
            }
        }
        OpCode::Grayscale => input(0).luminance(),
        OpCode::NormalFromHeight => {
            let strength = scalar(params, 0) as f32;
            let h = input(0).luminance();
            let scale = ctx.res as f32 / DEFAULT_RESOLUTION as f32 * 0.5;
            ImagePlane::from_fn(ctx.res, 3, |x, y, out| {
                let (x, y) = (x as isize, y as isize);
                let dhdx = (h.get_wrap(x + 1, y, 0) - h.get_wrap(x - 1, y, 0)) * scale;
                let dhdy = (h.get_wrap(x, y + 1, 0) - h.get_wrap(x, y - 1, 0)) * scale;
                let n = normalize([-strength * dhdx, -strength * dhdy, 1.0]);
                for c in 0..3 {
                    out[c] = 0.5 * n[c] + 0.5;
                }
            })
        }
        OpCode::Switch => {
            let sel = params[0].as_index().min(schema.n_inputs - 1);
            inputs[sel].clone()
        }
        OpCode::Output(Role::Albedo) => convert(input(0), 3, node)?,
        OpCode::Output(Role::Normal) => {
            let src = convert(input(0), 3, node)?;
            let mut out = src.clone();
            for (o, p) in out.data.chunks_exact_mut(3).zip(src.data.chunks_exact(3)) {
                let v = [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let n = if len < 1e-6 { [0.0, 0.0, 1.0] } else { v.map(|c| c / len) };
                for c in 0..3 {
                    o[c] = 0.5 * n[c] + 0.5;
                }
            }
            out
        }
        OpCode::Output(_) => convert(input(0), 1, node)?,
    };
    let out = if matches!(schema.code, OpCode::Output(Role::Normal)) {
        out
    } else {
        out.clamp01()
    };
    Ok(vec![out])
}

fn convert(img: &ImagePlane, channels: usize, node: usize) -> Result<ImagePlane> {
    img.with_channels(channels).ok_or_else(|| Error::ChannelMismatch {
        node,
        channels: img.channels,
        reason: format!("no conversion to {channels} channels"),
    })
}

fn normalize(v: [f32; 3]) -> [f32; 3] {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / len)
}

fn gaussian_blur(src: &ImagePlane, sigma: f64) -> ImagePlane {
    if sigma < 0.05 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / total).collect();
    let ch = src.channels;
    let pass = |img: &ImagePlane, horizontal: bool| {
        ImagePlane::from_fn(img.res, ch, |x, y, out| {
            out.fill(0.0);
            for (k, w) in weights.iter().enumerate() {
                let off = k as isize - radius;
                let (sx, sy) = if horizontal {
                    (x as isize + off, y as isize)
                } else {
                    (x as isize, y as isize + off)
                };
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * img.get_wrap(sx, sy, c);
                }
            }
        })
    };
    pass(&pass(src, true), false)
}

fn rgb_to_hsl(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = 0.5 * (max + min);
    let d = max - min;
    if d < 1e-12 {
        return (0.0, 0.0, l);
    }
    let s = if l > 0.5 {
        d / (2.0 - max - min)
    } else {
        d / (max + min)
    };
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, l)
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (f64, f64, f64) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - 0.5 * c;
    (r + m, g + m, b + m)
}

/// Evaluates every node that contributes to an output, in topological
/// order. Roles without an output node get default maps.
pub fn evaluate(g: &NodeGraph, lib: &OpLibrary, res: usize, seed: u64) -> Result<MaterialMaps> {
    evaluate_with(g, lib, &EvalContext::new(res, seed))
}

pub fn evaluate_with(g: &NodeGraph, lib: &OpLibrary, ctx: &EvalContext) -> Result<MaterialMaps> {
    let order = topological_order(g)?;
    let needed = reachable_to_outputs(g);
    let sources = g.input_sources();
    let mut results: Vec<Option<Vec<ImagePlane>>> = vec![None; g.nodes.len()];
    for id in order {
        if !needed.contains(&id) {
            continue;
        }
        let node = &g.nodes[id];
        let schema = lib
            .get(node.type_id)
            .ok_or_else(|| Error::UnknownOp(format!("#{}", node.type_id)))?;
        let mut inputs = Vec::with_capacity(schema.n_inputs);
        for slot in 0..schema.n_inputs {
            let src = sources
                .get(&(id, slot))
                .ok_or(Error::UnconnectedInput { node: id, slot })?;
            let plane = results[src.node]
                .as_ref()
                .and_then(|outs| outs.get(src.slot))
                .ok_or_else(|| Error::InvalidGraph(format!("edge into node {id} from missing slot")))?;
            inputs.push(plane);
        }
        let out = eval_op(schema, &node.params, &inputs, ctx, id)?;
        results[id] = Some(out);
    }
    let mut map = |role: Role| {
        g.outputs
            .get(&role)
            .and_then(|&id| results.get_mut(id).and_then(Option::take))
            .and_then(|mut v| v.pop())
            .unwrap_or_else(|| MaterialMaps::default_map(role, ctx.res))
    };
    Ok(MaterialMaps {
        albedo: map(Role::Albedo),
        normal: map(Role::Normal),
        roughness: map(Role::Roughness),
        metallic: map(Role::Metallic),
    })
}
