use thiserror::Error;

/// Errors surfaced by the numerical core and the experiment plumbing.
#[derive(Debug, Error)]
pub enum GrokError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a backward pass; re-record the forward pass")]
    StaleTape,

    #[error("degenerate feature column {column}: norm {norm:e} below floor")]
    DegenerateColumn { column: usize, norm: f64 },

    #[error("token id {token} out of range for modulus {modulus}")]
    TokenOutOfRange { token: usize, modulus: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gram matrix invariant violated: {0}")]
    GramInvariant(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("all-zero spectrum: gram matrix has no mass")]
    ZeroSpectrum,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IDX parse error at byte {offset}: {reason}")]
    IdxParse { offset: usize, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("run aborted at step {step}: {source}")]
    RunAborted {
        step: u64,
        #[source]
        source: Box<GrokError>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("log parse error at line {line}: {reason}")]
    LogParse { line: usize, reason: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GrokError>;
