use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps variants onto its exit-code contract: configuration and
/// usage problems exit 2, training divergence exits 3, checkpoint stage
/// mismatches exit 4, everything else exits 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, lhs {lhs_rows}x{lhs_cols} vs rhs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("{what} = {value} out of range [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("unknown parameter tensor `{0}`")]
    UnknownParam(String),

    #[error("parameter tensor `{0}` already exists")]
    DuplicateParam(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss = {loss:e})")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("checkpoint is missing expert scale n={0} required by the config")]
    MissingScale(usize),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
