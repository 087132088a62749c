use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("kernel attention needs at least one key")]
    EmptyKeys,

    #[error("loss function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
