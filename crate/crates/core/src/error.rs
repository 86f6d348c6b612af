use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a tensor of rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{what} is not a probability distribution (sum = {sum})")]
    Normalization { what: &'static str, sum: f64 },
    #[error("degenerate vector in {op}: norm below 1e-12")]
    DegenerateVector { op: &'static str },
    #[error("degenerate batch in {op}: needs at least 2 samples, got {size}")]
    DegenerateBatch { op: &'static str, size: usize },
    #[error("split violation: class {class} is not allowed here ({reason})")]
    SplitViolation { class: usize, reason: &'static str },
    #[error("no negative available: batch has a single class")]
    NoNegative,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("unsupported format version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
