//! Python bindings. Graphs and token sequences cross the boundary as JSON
//! strings in the same formats the command-line tool reads and writes.

use std::borrow::Cow;
use std::path::Path;

use matforge::corpus::rng_for;
use matforge::matching::{encode_prompt as prompt_embedding, style_distance as style, StyleMetricConfig};
use matforge::model::ModelStack;
use matforge::sampler::{sample_candidates, SamplerConfig};
use matforge::tokenizer::{encode_with, NodeOrder};
use matforge::{evaluate, render as shade, ImagePlane, NodeGraph, OpLibrary, RenderConfig, TokenizedGraph};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn lib() -> &'static OpLibrary {
    OpLibrary::standard()
}

fn err(e: matforge::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    err(e.into())
}

fn graph(text: &str) -> PyResult<NodeGraph> {
    NodeGraph::from_json(text, lib()).map_err(err)
}

fn order(name: &str) -> PyResult<NodeOrder> {
    match name {
        "back_to_front" => Ok(NodeOrder::BackToFront),
        "front_to_back" => Ok(NodeOrder::FrontToBack),
        _ => Err(PyValueError::new_err(format!("unknown node order `{name}`"))),
    }
}

fn image(res: usize, rgb: &[u8]) -> PyResult<ImagePlane> {
    if rgb.len() != res * res * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} RGB bytes for resolution {res}, got {}",
            res * res * 3,
            rgb.len()
        )));
    }
    let mut img = ImagePlane::new(res, 3);
    for (d, &b) in img.data.iter_mut().zip(rgb) {
        *d = b as f32 / 255.0;
    }
    Ok(img)
}

/// Names of all operation types, indexed by type id.
#[pyfunction]
fn op_names() -> Vec<String> {
    (0..lib().len()).map(|i| lib().schema(i).name.to_string()).collect()
}

/// Validation report of a graph as JSON.
#[pyfunction]
fn validate(graph_json: &str) -> PyResult<String> {
    let report = matforge::validate_graph(&graph(graph_json)?, lib());
    serde_json::to_string(&report).map_err(json_err)
}

/// Token sequences of a graph as JSON.
#[pyfunction]
#[pyo3(signature = (graph_json, node_order = "back_to_front"))]
fn encode(graph_json: &str, node_order: &str) -> PyResult<String> {
    let t = encode_with(&graph(graph_json)?, lib(), order(node_order)?).map_err(err)?;
    serde_json::to_string(&t).map_err(json_err)
}

/// Graph JSON rebuilt from token sequences.
#[pyfunction]
fn decode(tokens_json: &str) -> PyResult<String> {
    let t: TokenizedGraph = serde_json::from_str(tokens_json).map_err(json_err)?;
    Ok(matforge::decode(&t, lib()).map_err(err)?.to_json(lib()))
}

/// Shaded render as row-major RGB bytes of size `resolution² · 3`.
#[pyfunction]
#[pyo3(signature = (graph_json, resolution = 128, seed = 0))]
fn render(graph_json: &str, resolution: usize, seed: u64) -> PyResult<Cow<'static, [u8]>> {
    let maps = evaluate(&graph(graph_json)?, lib(), resolution, seed).map_err(err)?;
    Ok(Cow::Owned(shade(&maps, &RenderConfig::default()).to_bytes(None)))
}

/// Prompt embedding of an RGB image.
#[pyfunction]
fn encode_prompt(resolution: usize, rgb: &[u8]) -> PyResult<Vec<f32>> {
    Ok(prompt_embedding(&image(resolution, rgb)?))
}

/// Style distance between two RGB images of equal resolution.
#[pyfunction]
fn style_distance(resolution: usize, a: &[u8], b: &[u8]) -> PyResult<f64> {
    Ok(style(&image(resolution, a)?, &image(resolution, b)?, &StyleMetricConfig::default()))
}

/// Samples `n` graphs from a checkpoint directory. Without an image the
/// samples are unconditional.
#[pyfunction]
#[pyo3(signature = (ckpt_dir, n = 30, seed = 0, resolution = None, rgb = None, top_p = 0.9))]
fn generate(
    ckpt_dir: &str,
    n: usize,
    seed: u64,
    resolution: Option<usize>,
    rgb: Option<&[u8]>,
    top_p: f64,
) -> PyResult<Vec<String>> {
    let stack = ModelStack::load_dir(Path::new(ckpt_dir), lib()).map_err(err)?;
    let cond = match (resolution, rgb) {
        (Some(res), Some(bytes)) => stack.condition(&prompt_embedding(&image(res, bytes)?)),
        (None, None) => stack.unconditional(),
        _ => return Err(PyValueError::new_err("resolution and rgb must be given together")),
    };
    let cfg = SamplerConfig {
        seed,
        top_p,
        ..SamplerConfig::default()
    };
    let graphs = sample_candidates(&stack, &cond, &cfg, None, n, lib()).map_err(err)?;
    Ok(graphs.iter().map(|g| g.to_json(lib())).collect())
}

/// Deterministic stream seed derived from a run seed and a stream id.
#[pyfunction]
fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    rng_for(seed, stream).next_u64()
}

#[pymodule]
fn matforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(op_names, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(encode_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(style_distance, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
