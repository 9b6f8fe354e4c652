use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or speculation configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Bad argument to an operation (empty prompt, length mismatch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Position-id ordering or range violation.
    #[error("position constraint violated: {0}")]
    Position(String),

    /// KV cache is out of slots.
    #[error("kv cache capacity exceeded: {0}")]
    Capacity(String),

    /// Importance aggregation received zero valid rows.
    #[error("no valid rows to aggregate")]
    EmptyAggregation,

    /// Checkpoint magic/header/layout problems.
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    /// Tensor shape in the checkpoint disagrees with its header config.
    #[error("checkpoint tensor `{tensor}`: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    /// File ends before the declared tensor payload does.
    #[error("truncated checkpoint payload: need {needed} bytes, only {available} available")]
    TruncatedPayload { needed: u64, available: u64 },

    /// A request file line that does not parse; carries the 1-based line number.
    #[error("bad request on line {line}: {detail}")]
    BadRequestLine { line: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class for the CLI: 3 for I/O, 4 for validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            _ => 4,
        }
    }
}
