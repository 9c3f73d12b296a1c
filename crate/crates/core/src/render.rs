//! Shading of material maps on a unit plane lit by a point light placed at
//! the camera.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::eval::MaterialMaps;
use crate::image::ImagePlane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub light_intensity: f32,
    /// Height of the camera (and light) above the plane centre, in plane widths.
    pub camera_distance: f32,
    /// Directional light and view along the plane normal instead of a point light.
    pub orthographic: bool,
    pub gamma: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            light_intensity: 10.0,
            camera_distance: 2.0,
            orthographic: false,
            gamma: 2.2,
        }
    }
}

/// Isotropic GGX specular term for collocated light and view, with
/// Smith height-correlated visibility and Schlick Fresnel.
fn ggx_specular(n_dot_l: f32, n_dot_h: f32, roughness: f32, f0: [f32; 3]) -> [f32; 3] {
    let alpha = (roughness * roughness).max(1e-3);
    let a2 = alpha * alpha;
    let denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * denom * denom);
    let n_dot_v = n_dot_l;
    let lambda_v = n_dot_l * (n_dot_v * n_dot_v * (1.0 - a2) + a2).sqrt();
    let lambda_l = n_dot_v * (n_dot_l * n_dot_l * (1.0 - a2) + a2).sqrt();
    let vis = 0.5 / (lambda_v + lambda_l).max(1e-7);
    // v.h = 1 when light and view coincide, so Fresnel reduces to F0.
    f0.map(|f| d * vis * f)
}

pub fn render(maps: &MaterialMaps, cfg: &RenderConfig) -> ImagePlane {
    let res = maps.res();
    let r = res as f32;
    let inv_gamma = 1.0 / cfg.gamma;
    ImagePlane::from_fn(res, 3, |x, y, out| {
        let albedo = maps.albedo.pixel(x, y);
        let enc = maps.normal.pixel(x, y);
        let n = {
            let v = [2.0 * enc[0] - 1.0, 2.0 * enc[1] - 1.0, 2.0 * enc[2] - 1.0];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
            v.map(|c| c / len)
        };
        let roughness = maps.roughness.get(x, y, 0);
        let metallic = maps.metallic.get(x, y, 0);
        let (l, dist2) = if cfg.orthographic {
            ([0.0, 0.0, 1.0], cfg.camera_distance * cfg.camera_distance)
        } else {
            let p = [(x as f32 + 0.5) / r - 0.5, 0.5 - (y as f32 + 0.5) / r, 0.0];
            let to_light = [-p[0], -p[1], cfg.camera_distance];
            let d2 = to_light.iter().map(|c| c * c).sum::<f32>();
            let len = d2.sqrt();
            (to_light.map(|c| c / len), d2)
        };
        let n_dot_l = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
        let f0 = [0, 1, 2].map(|c| 0.04 + (albedo[c] - 0.04) * metallic);
        let spec = ggx_specular(n_dot_l.max(1e-4), n_dot_l, roughness, f0);
        for c in 0..3 {
            let diffuse = albedo[c] / PI * (1.0 - metallic);
            let radiance = (diffuse + spec[c]) * cfg.light_intensity * n_dot_l / dist2;
            out[c] = radiance.clamp(0.0, 1.0).powf(inv_gamma);
        }
    })
}
