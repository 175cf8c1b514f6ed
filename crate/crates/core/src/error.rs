use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate mask: a normalized row has no live position")]
    DegenerateMask,

    #[error("index {index} out of range for size {len}")]
    Index { index: usize, len: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("text is empty after cleaning")]
    EmptyText,

    #[error("gold entity not found in text of example `{id}`")]
    GoldNotFound { id: String },

    #[error("sequence length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("incompatible inputs: {0}")]
    Compat(String),

    #[error("unknown example id `{0}`")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
