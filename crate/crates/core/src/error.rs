use thiserror::Error;

#[derive(Debug, Error)]
pub enum TpeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no unmasked entry")]
    FullyMaskedRow { row: usize },
    #[error("loss mask selects no position")]
    EmptyLossMask,
    #[error("backward called on a value that was not recorded in this graph")]
    NotRecorded,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("table is not rectangular: row {row} has {found} cells, expected {expected}")]
    NotRectangular { row: usize, expected: usize, found: usize },
    #[error("empty cell at ({row}, {col})")]
    EmptyCell { row: usize, col: usize },
    #[error("malformed segments: {0}")]
    MalformedSegments(String),
    #[error("duplicate position {position} in order {order}")]
    DuplicatePosition { order: usize, position: usize },
    #[error("invalid rope configuration: {0}")]
    Rope(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("infeasible task dimensions: {0}")]
    Infeasible(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TpeError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TpeError {
    TpeError::Shape { op, detail: detail.into() }
}
