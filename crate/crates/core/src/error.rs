use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty attention context: softmax row {row} is fully masked")]
    EmptyAttentionRow { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("no legal merge target: state has {rows} rows and {sinks} protected sinks")]
    NoMergeTarget { rows: usize, sinks: usize },

    #[error("invalid merge target {target} for state of {rows} rows with {sinks} protected sinks")]
    InvalidMergeTarget {
        target: usize,
        rows: usize,
        sinks: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
