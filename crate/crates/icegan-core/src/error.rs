use thiserror::Error;

/// Errors produced by tensor math, model construction, data handling and I/O.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("inner dimension mismatch in matmul: {lhs:?} · {rhs:?}")]
    InnerDimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op} expects {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("channel mismatch: layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("degenerate output extent for conv: input {h}x{w}, kernel {k}, stride {s}, pad {p}")]
    DegenerateExtent {
        h: usize,
        w: usize,
        k: usize,
        s: usize,
        p: usize,
    },

    #[error("unknown parameter path: {0}")]
    UnknownParam(String),

    #[error("missing gradients for parameters: {0:?}")]
    MissingGrads(Vec<String>),

    #[error("epoch {epoch} outside schedule horizon {t_max}")]
    EpochOutOfRange { epoch: usize, t_max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid class index {got}, expected 0..{n_classes}")]
    InvalidClass { got: usize, n_classes: usize },

    #[error("class vector is not one-hot: {0:?}")]
    NotOneHot(Vec<f64>),

    #[error("invalid input geometry: expected {expected}, got {got}")]
    BadGeometry { expected: String, got: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("manifest errors:\n{}", .0.join("\n"))]
    Manifest(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {reason}; last good checkpoint: {last_checkpoint:?}")]
    TrainingAborted {
        reason: String,
        last_checkpoint: Option<std::path::PathBuf>,
    },

    #[error("routing produced non-finite logits at iteration {iteration}: {detail}")]
    RoutingDiverged { iteration: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
