//! Periodic noise primitives. All functions take texture coordinates in
//! `[0, 1)` and tile with period 1 for integer frequencies.

use std::f64::consts::TAU;

#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[inline]
pub fn hash_combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b).rotate_left(17))
}

#[inline]
fn lattice(seed: u64, ix: i64, iy: i64, period: i64) -> u64 {
    let x = ix.rem_euclid(period) as u64;
    let y = iy.rem_euclid(period) as u64;
    hash_combine(seed, x.wrapping_mul(0x0001_0000_0001) ^ (y << 20) ^ y)
}

#[inline]
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Gradient noise with `period` lattice cells per unit, roughly in `[-1, 1]`.
pub fn perlin(u: f64, v: f64, period: i64, seed: u64) -> f64 {
    let x = u * period as f64;
    let y = v * period as f64;
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let grad = |cx: i64, cy: i64, dx: f64, dy: f64| {
        let angle = unit(lattice(seed, cx, cy, period)) * TAU;
        angle.cos() * dx + angle.sin() * dy
    };
    let n00 = grad(ix, iy, fx, fy);
    let n10 = grad(ix + 1, iy, fx - 1.0, fy);
    let n01 = grad(ix, iy + 1, fx, fy - 1.0);
    let n11 = grad(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
    let (sx, sy) = (fade(fx), fade(fy));
    let top = n00 + (n10 - n00) * sx;
    let bottom = n01 + (n11 - n01) * sx;
    (top + (bottom - top) * sy) * std::f64::consts::SQRT_2
}

/// Fractal sum of `octaves` perlin layers, each doubling the frequency and
/// scaling the amplitude by `gain`; normalized by the total amplitude.
pub fn fbm(u: f64, v: f64, period: i64, octaves: u32, gain: f64, seed: u64) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    for o in 0..octaves {
        sum += amp * perlin(u, v, period << o, hash_combine(seed, o as u64));
        norm += amp;
        amp *= gain;
    }
    sum / norm
}

/// Distance to the nearest jittered feature point (Worley F1), in cell units.
pub fn cells(u: f64, v: f64, period: i64, jitter: f64, seed: u64) -> f64 {
    let x = u * period as f64;
    let y = v * period as f64;
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    let mut best = f64::INFINITY;
    for oy in -1..=1 {
        for ox in -1..=1 {
            let (gx, gy) = (cx + ox, cy + oy);
            let h = lattice(seed, gx, gy, period);
            let px = gx as f64 + 0.5 + jitter * (unit(h) - 0.5);
            let py = gy as f64 + 0.5 + jitter * (unit(mix64(h)) - 0.5);
            let d = ((px - x).powi(2) + (py - y).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}
