use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph inputs were rebound since the last forward evaluation")]
    StaleGraph,

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("objective is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),

    #[error("gradient check epsilon {0} outside [1e-5, 1e-2]")]
    Epsilon(f64),

    #[error("invalid model spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        vocab: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("expansion plan: {0}")]
    Plan(String),

    #[error("merge: {0}")]
    Merge(String),

    #[error("interpolator: {0}")]
    Interpolator(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("gradient supplied for frozen tensor `{0}`")]
    FrozenGradient(String),

    #[error("training aborted at step {step} (lr {lr:e}): {reason}")]
    TrainingAborted { step: usize, lr: f64, reason: String },

    #[error("metric log is empty")]
    EmptyLog,

    #[error("probe: {0}")]
    Probe(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
