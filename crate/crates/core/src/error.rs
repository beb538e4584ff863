use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("matrix {name}: {source}")]
    Matrix {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("token id {token} out of range for a vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("kv cache is full ({0} positions)")]
    CacheOverflow(usize),

    #[error("missing tape entry {0}")]
    MissingTape(String),

    #[error("method {method} does not match the model: {detail}")]
    MethodMismatch { method: String, detail: String },

    #[error("adapter is already merged")]
    AlreadyMerged,

    #[error("cannot merge onto a quantized base; dequantize it first")]
    QuantizedBase,

    #[error("replica {0} diverged from the center model")]
    ReplicaDivergence(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by numeric failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NoConvergence { .. } => true,
            Error::Matrix { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
