//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("latent {latent} out of range at layer {layer} (width {d_latent})")]
    LatentOutOfRange {
        layer: usize,
        latent: usize,
        d_latent: usize,
    },

    #[error("missing activations for layer {0}")]
    MissingActivations(usize),

    #[error("target variance is zero at layer {0}")]
    ZeroVariance(usize),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("sequence length {input} does not match base trace length {base}")]
    LengthMismatch { input: usize, base: usize },

    #[error("direct replacement requires a cross-layer transcoder; a per-layer transcoder has no cross-layer decoders")]
    DirectModeRequiresClt,

    #[error("{0}")]
    InvalidInput(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
