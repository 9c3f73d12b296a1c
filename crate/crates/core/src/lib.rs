//! Procedural material node graphs: evaluation, tokenization, conditional
//! autoregressive generation, validity-masked sampling and image-space
//! parameter refinement.

pub mod error;
pub mod eval;
pub mod corpus;
pub mod graph;
pub mod image;
pub mod matching;
pub mod model;
pub mod nn;
pub mod noise;
pub mod ops;
pub mod render;
pub mod sampler;
pub mod tokenizer;

pub use error::{Error, Result};
pub use eval::{eval_node, evaluate, MaterialMaps};
pub use graph::{
    remove_unconnected_nodes, topological_order, validate_graph, Edge, Node, NodeGraph,
    ValidationReport,
};
pub use image::ImagePlane;
pub use ops::{OpLibrary, OpSchema, ParamKind, ParamSchema, ParamValue, Role};
pub use render::{render, RenderConfig};
pub use tokenizer::{decode, encode, TokenizedGraph};
