use thiserror::Error;

/// Errors raised across the toolkit. Each variant maps to a stable
/// machine-readable kind string via [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("graph contains a cycle through node {node}")]
    CycleDetected { node: usize },
    #[error("node {node} input slot {slot} is not connected")]
    UnconnectedInput { node: usize, slot: usize },
    #[error("node {node}: cannot convert a {channels}-channel plane ({reason})")]
    ChannelMismatch {
        node: usize,
        channels: usize,
        reason: String,
    },
    #[error("value {value} outside [{lo}, {hi}] for parameter {param}")]
    OutOfRange {
        param: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("graph exceeds size caps: {0}")]
    SizeCapExceeded(String),
    #[error("malformed {stream} sequence at offset {offset}: {reason}")]
    MalformedSequence {
        stream: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("pointer {pointer} at edge offset {offset} exceeds slot list of length {len}")]
    PointerOutOfRange {
        pointer: usize,
        offset: usize,
        len: usize,
    },
    #[error("decoded edges introduce a cycle through node {node}")]
    CycleIntroduced { node: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("unknown operation type `{0}`")]
    UnknownOp(String),
    #[error("prefix of length {len} exceeds maximum {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("slot list is empty")]
    EmptySlotList,
    #[error("edge list inconsistent with node sequence: {0}")]
    InconsistentEdges(String),
    #[error("parameter tokens not aligned with node embeddings: {0}")]
    AlignmentMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("decoding stalled: no admissible token ({0})")]
    DecodeStall(String),
    #[error("graph has no optimizable parameters")]
    NoOptimizableParameters,
    #[error("corpus is empty after {0}")]
    EmptyCorpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CycleDetected { .. } => "cycle-detected",
            Error::UnconnectedInput { .. } => "unconnected-input",
            Error::ChannelMismatch { .. } => "channel-mismatch",
            Error::OutOfRange { .. } => "out-of-range",
            Error::SizeCapExceeded(_) => "size-cap-exceeded",
            Error::MalformedSequence { .. } => "malformed-sequence",
            Error::PointerOutOfRange { .. } => "pointer-out-of-range",
            Error::CycleIntroduced { .. } => "cycle-introduced",
            Error::InvalidGraph(_) => "invalid-graph",
            Error::UnknownOp(_) => "unknown-op",
            Error::PrefixTooLong { .. } => "prefix-too-long",
            Error::EmptySlotList => "empty-slot-list",
            Error::InconsistentEdges(_) => "inconsistent-edges",
            Error::AlignmentMismatch(_) => "alignment-mismatch",
            Error::Divergence { .. } => "divergence",
            Error::DecodeStall(_) => "decode-stall",
            Error::NoOptimizableParameters => "no-optimizable-parameters",
            Error::EmptyCorpus(_) => "empty-corpus",
            Error::Checkpoint(_) => "checkpoint-error",
            Error::Config(_) => "config-parse-error",
            Error::Image(_) => "image-error",
            Error::Io { .. } => "io-failure",
            Error::Json(_) => "json-error",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
