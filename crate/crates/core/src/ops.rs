//! The fixed operator library: node types, their slots and parameter schemas.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Material-map role of an output node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Albedo,
    Normal,
    Roughness,
    Metallic,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Albedo, Role::Normal, Role::Roughness, Role::Metallic];

    pub fn name(self) -> &'static str {
        match self {
            Role::Albedo => "albedo",
            Role::Normal => "normal",
            Role::Roughness => "roughness",
            Role::Metallic => "metallic",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamKind {
    Float,
    /// Fixed-length float vector.
    FloatVec(usize),
    Int,
    Enum(&'static [&'static str]),
}

impl ParamKind {
    pub fn scalar_count(&self) -> usize {
        match self {
            ParamKind::FloatVec(n) => *n,
            _ => 1,
        }
    }

    /// Small integer id used as an auxiliary token feature.
    pub fn id(&self) -> usize {
        match self {
            ParamKind::Float => 0,
            ParamKind::FloatVec(_) => 1,
            ParamKind::Int => 2,
            ParamKind::Enum(_) => 3,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ParamKind::Int | ParamKind::Enum(_))
    }
}

/// A parameter value as stored on a node. Integers and enumeration
/// indices are stored as integral scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ParamValue {
    pub fn scalars(&self) -> &[f64] {
        match self {
            ParamValue::Scalar(v) => std::slice::from_ref(v),
            ParamValue::Vector(v) => v,
        }
    }

    pub fn scalars_mut(&mut self) -> &mut [f64] {
        match self {
            ParamValue::Scalar(v) => std::slice::from_mut(v),
            ParamValue::Vector(v) => v,
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.scalars()[0]
    }

    pub fn as_index(&self) -> usize {
        self.scalars()[0].round().max(0.0) as usize
    }
}

#[derive(Clone, Debug)]
pub struct ParamSchema {
    pub name: &'static str,
    pub kind: ParamKind,
    /// Per-element range. For enumerations this is `[0, cardinality - 1]`.
    pub lo: f64,
    pub hi: f64,
    pub default: ParamValue,
    /// Continuous parameter the refinement step may move.
    pub optimizable: bool,
    /// Never resampled during augmentation (random seeds, switch selectors).
    pub frozen: bool,
}

impl ParamSchema {
    fn float(name: &'static str, lo: f64, hi: f64, default: f64, optimizable: bool) -> Self {
        ParamSchema {
            name,
            kind: ParamKind::Float,
            lo,
            hi,
            default: ParamValue::Scalar(default),
            optimizable,
            frozen: false,
        }
    }

    fn color(name: &'static str, default: [f64; 3]) -> Self {
        ParamSchema {
            name,
            kind: ParamKind::FloatVec(3),
            lo: 0.0,
            hi: 1.0,
            default: ParamValue::Vector(default.to_vec()),
            optimizable: true,
            frozen: false,
        }
    }

    fn int(name: &'static str, lo: i64, hi: i64, default: i64) -> Self {
        ParamSchema {
            name,
            kind: ParamKind::Int,
            lo: lo as f64,
            hi: hi as f64,
            default: ParamValue::Scalar(default as f64),
            optimizable: false,
            frozen: false,
        }
    }

    fn seed() -> Self {
        ParamSchema {
            frozen: true,
            ..ParamSchema::int("seed", 0, 127, 0)
        }
    }

    fn selector(branches: usize) -> Self {
        ParamSchema {
            frozen: true,
            ..ParamSchema::int("selector", 0, branches as i64 - 1, 0)
        }
    }

    fn enumeration(name: &'static str, values: &'static [&'static str], default: usize) -> Self {
        ParamSchema {
            name,
            kind: ParamKind::Enum(values),
            lo: 0.0,
            hi: (values.len() - 1) as f64,
            default: ParamValue::Scalar(default as f64),
            optimizable: false,
            frozen: false,
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.kind.scalar_count()
    }

    /// Checks kind, arity, integrality and range of a stored value.
    pub fn check(&self, value: &ParamValue) -> std::result::Result<(), String> {
        let scalars = match (&self.kind, value) {
            (ParamKind::FloatVec(n), ParamValue::Vector(v)) if v.len() == *n => v.as_slice(),
            (ParamKind::FloatVec(n), _) => {
                return Err(format!("{} expects a vector of length {n}", self.name))
            }
            (_, ParamValue::Scalar(v)) => std::slice::from_ref(v),
            (_, ParamValue::Vector(_)) => return Err(format!("{} expects a scalar", self.name)),
        };
        for &v in scalars {
            if !v.is_finite() || v < self.lo || v > self.hi {
                return Err(format!(
                    "{} = {v} outside [{}, {}]",
                    self.name, self.lo, self.hi
                ));
            }
            if self.kind.is_discrete() && v.fract() != 0.0 {
                return Err(format!("{} = {v} is not integral", self.name));
            }
        }
        Ok(())
    }
}

/// Evaluation routine selected by an operation type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpCode {
    UniformColor,
    PerlinNoise,
    FbmNoise,
    Cells,
    Checker,
    GradientLinear,
    Brick,
    Blend,
    Levels,
    HslAdjust,
    BlurGaussian,
    Transform2d,
    DirectionalWarp,
    Invert,
    Threshold,
    Colorize,
    Grayscale,
    NormalFromHeight,
    Switch,
    Output(Role),
}

#[derive(Clone, Debug)]
pub struct OpSchema {
    pub type_id: usize,
    pub name: &'static str,
    pub code: OpCode,
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub params: Vec<ParamSchema>,
}

impl OpSchema {
    pub fn is_generator(&self) -> bool {
        self.n_inputs == 0
    }

    pub fn output_role(&self) -> Option<Role> {
        match self.code {
            OpCode::Output(role) => Some(role),
            _ => None,
        }
    }

    pub fn is_output(&self) -> bool {
        self.output_role().is_some()
    }

    pub fn is_switch(&self) -> bool {
        self.code == OpCode::Switch
    }

    pub fn slot_count(&self) -> usize {
        self.n_inputs + self.n_outputs
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(ParamSchema::scalar_count).sum()
    }

    pub fn default_params(&self) -> Vec<ParamValue> {
        self.params.iter().map(|p| p.default.clone()).collect()
    }
}

pub const BLEND_MODES: &[&str] = &["copy", "multiply", "add", "subtract", "max", "min"];

/// The vocabulary of node types. Type ids are dense `0..len()`.
#[derive(Clone, Debug)]
pub struct OpLibrary {
    ops: Vec<OpSchema>,
}

impl OpLibrary {
    /// The built-in library shared by every module.
    pub fn standard() -> &'static OpLibrary {
        static LIBRARY: OnceLock<OpLibrary> = OnceLock::new();
        LIBRARY.get_or_init(build_standard)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn get(&self, type_id: usize) -> Option<&OpSchema> {
        self.ops.get(type_id)
    }

    pub fn schema(&self, type_id: usize) -> &OpSchema {
        &self.ops[type_id]
    }

    pub fn by_name(&self, name: &str) -> Option<&OpSchema> {
        self.ops.iter().find(|op| op.name == name)
    }

    /// Type id for `name`. Panics on unknown names; use [`by_name`](Self::by_name)
    /// for untrusted input.
    pub fn id(&self, name: &str) -> usize {
        self.by_name(name)
            .unwrap_or_else(|| panic!("unknown op {name}"))
            .type_id
    }

    pub fn output_op(&self, role: Role) -> &OpSchema {
        self.ops
            .iter()
            .find(|op| op.output_role() == Some(role))
            .expect("library defines every output role")
    }

    pub fn iter(&self) -> impl Iterator<Item = &OpSchema> {
        self.ops.iter()
    }

    pub fn max_inputs(&self) -> usize {
        self.ops.iter().map(|op| op.n_inputs).max().unwrap_or(0)
    }

    pub fn max_slots(&self) -> usize {
        self.ops.iter().map(|op| op.slot_count()).max().unwrap_or(0)
    }

    pub fn max_params(&self) -> usize {
        self.ops.iter().map(|op| op.params.len()).max().unwrap_or(0)
    }

    pub fn max_scalars(&self) -> usize {
        self.ops.iter().map(OpSchema::scalar_count).max().unwrap_or(0)
    }

    /// Flat index of `(type_id, param_index)` over all parameters of the library.
    pub fn global_param_index(&self, type_id: usize, param: usize) -> usize {
        self.ops[..type_id]
            .iter()
            .map(|op| op.params.len())
            .sum::<usize>()
            + param
    }

    pub fn total_params(&self) -> usize {
        self.ops.iter().map(|op| op.params.len()).sum()
    }
}

fn build_standard() -> OpLibrary {
    use OpCode::*;
    let mut ops = Vec::new();
    let mut push = |name: &'static str, code: OpCode, n_inputs: usize, params: Vec<ParamSchema>| {
        let n_outputs = if matches!(code, Output(_)) { 0 } else { 1 };
        ops.push(OpSchema {
            type_id: ops.len(),
            name,
            code,
            n_inputs,
            n_outputs,
            params,
        });
    };

    push(
        "uniform_color",
        UniformColor,
        0,
        vec![ParamSchema::color("color", [0.5, 0.5, 0.5])],
    );
    push(
        "perlin_noise",
        PerlinNoise,
        0,
        vec![ParamSchema::int("scale", 1, 32, 4), ParamSchema::seed()],
    );
    push(
        "fbm_noise",
        FbmNoise,
        0,
        vec![
            ParamSchema::int("scale", 1, 16, 4),
            ParamSchema::int("octaves", 1, 6, 4),
            ParamSchema::float("gain", 0.2, 0.8, 0.5, true),
            ParamSchema::seed(),
        ],
    );
    push(
        "cells",
        Cells,
        0,
        vec![
            ParamSchema::int("scale", 1, 24, 6),
            ParamSchema::float("jitter", 0.0, 1.0, 0.8, true),
            ParamSchema::seed(),
        ],
    );
    push("checker", Checker, 0, vec![ParamSchema::int("tiles", 1, 16, 4)]);
    push(
        "gradient_linear",
        GradientLinear,
        0,
        vec![ParamSchema::float("angle", 0.0, 1.0, 0.0, true)],
    );
    push(
        "brick",
        Brick,
        0,
        vec![
            ParamSchema::int("rows", 1, 8, 4),
            ParamSchema::int("cols", 1, 16, 4),
            ParamSchema::float("mortar_width", 0.02, 0.3, 0.08, true),
        ],
    );
    push(
        "blend",
        Blend,
        2,
        vec![
            ParamSchema::enumeration("mode", BLEND_MODES, 0),
            ParamSchema::float("opacity", 0.0, 1.0, 1.0, true),
        ],
    );
    push(
        "levels",
        Levels,
        1,
        vec![
            ParamSchema::float("in_lo", 0.0, 1.0, 0.0, true),
            ParamSchema::float("in_hi", 0.0, 1.0, 1.0, true),
            ParamSchema::float("gamma", 0.2, 5.0, 1.0, true),
            ParamSchema::float("out_lo", 0.0, 1.0, 0.0, true),
            ParamSchema::float("out_hi", 0.0, 1.0, 1.0, true),
        ],
    );
    push(
        "hsl_adjust",
        HslAdjust,
        1,
        vec![
            ParamSchema::float("hue", -0.5, 0.5, 0.0, true),
            ParamSchema::float("saturation", -1.0, 1.0, 0.0, true),
            ParamSchema::float("lightness", -1.0, 1.0, 0.0, true),
        ],
    );
    push(
        "blur_gaussian",
        BlurGaussian,
        1,
        vec![ParamSchema::float("radius", 0.0, 8.0, 1.0, true)],
    );
    push(
        "transform2d",
        Transform2d,
        1,
        vec![
            ParamSchema::float("scale_x", 0.25, 4.0, 1.0, false),
            ParamSchema::float("scale_y", 0.25, 4.0, 1.0, false),
            ParamSchema::float("rotation", 0.0, 1.0, 0.0, false),
            ParamSchema::float("offset_x", 0.0, 1.0, 0.0, false),
            ParamSchema::float("offset_y", 0.0, 1.0, 0.0, false),
        ],
    );
    push(
        "directional_warp",
        DirectionalWarp,
        2,
        vec![
            ParamSchema::float("intensity", 0.0, 0.25, 0.05, true),
            ParamSchema::float("angle", 0.0, 1.0, 0.0, false),
        ],
    );
    push("invert", Invert, 1, vec![]);
    push(
        "threshold",
        Threshold,
        1,
        vec![ParamSchema::float("level", 0.0, 1.0, 0.5, true)],
    );
    push(
        "colorize",
        Colorize,
        1,
        vec![
            ParamSchema::color("color_a", [0.0, 0.0, 0.0]),
            ParamSchema::color("color_b", [1.0, 1.0, 1.0]),
        ],
    );
    push("grayscale", Grayscale, 1, vec![]);
    push(
        "normal_from_height",
        NormalFromHeight,
        1,
        vec![ParamSchema::float("strength", 0.0, 16.0, 2.0, true)],
    );
    for branches in 2..=4 {
        let name = match branches {
            2 => "switch2",
            3 => "switch3",
            _ => "switch4",
        };
        push(name, Switch, branches, vec![ParamSchema::selector(branches)]);
    }
    for role in Role::ALL {
        let name = match role {
            Role::Albedo => "output_albedo",
            Role::Normal => "output_normal",
            Role::Roughness => "output_roughness",
            Role::Metallic => "output_metallic",
        };
        push(name, Output(role), 1, vec![]);
    }
    OpLibrary { ops }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_invariants_hold() {
        let lib = OpLibrary::standard();
        for (i, op) in lib.iter().enumerate() {
            assert_eq!(op.type_id, i);
            assert!(op.n_outputs >= 1 || op.is_output(), "{}", op.name);
            for p in &op.params {
                assert!(p.lo < p.hi, "{}.{}", op.name, p.name);
                p.check(&p.default).unwrap();
                if let ParamKind::Enum(values) = p.kind {
                    assert!(values.len() <= 128);
                }
            }
        }
        for role in Role::ALL {
            assert_eq!(lib.output_op(role).output_role(), Some(role));
        }
    }

    #[test]
    fn check_rejects_bad_values() {
        let lib = OpLibrary::standard();
        let perlin = lib.by_name("perlin_noise").unwrap();
        assert!(perlin.params[0].check(&ParamValue::Scalar(2.5)).is_err());
        assert!(perlin.params[0].check(&ParamValue::Scalar(40.0)).is_err());
        let color = &lib.by_name("uniform_color").unwrap().params[0];
        assert!(color.check(&ParamValue::Scalar(0.5)).is_err());
        assert!(color.check(&ParamValue::Vector(vec![0.1, 0.2])).is_err());
    }

    #[test]
    fn global_param_index_is_dense() {
        let lib = OpLibrary::standard();
        let mut seen = vec![false; lib.total_params()];
        for op in lib.iter() {
            for p in 0..op.params.len() {
                seen[lib.global_param_index(op.type_id, p)] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }
}
