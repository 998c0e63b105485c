use thiserror::Error;

pub type Result<T, E = GmnnError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by how a caller is expected to react; see
/// [`GmnnError::kind`].
#[derive(Debug, Error)]
pub enum GmnnError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: event ({x}, {y}) outside {width}x{height} sensor")]
    Bounds {
        line: usize,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("line {line}: timestamp {t} precedes previous timestamp {prev}")]
    Ordering { line: usize, t: u64, prev: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of bounds for domain of size {len}")]
    Index { index: usize, len: usize },

    #[error("empty graph")]
    EmptyGraph,

    #[error("structural error: {0}")]
    Structural(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure category, stable across versions (the CLI maps it onto
/// exit codes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl GmnnError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            GmnnError::Config(_) | GmnnError::Checkpoint(_) => ErrorKind::Config,
            GmnnError::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GmnnError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        GmnnError::Config(msg.into())
    }
}
