use thiserror::Error;

/// Errors raised anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: argument outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("backward already ran on this graph; build a new forward pass")]
    BackwardTwice,

    #[error("sequence too short: {0} tokens, need at least 2")]
    SequenceTooShort(usize),

    #[error("token id {id} out of range for vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("grammar: {0}")]
    Grammar(String),

    #[error("malformed derivation: {0}")]
    Derivation(String),

    #[error("annotation: {0}")]
    Annotation(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("generation budget exhausted for {what}: accepted {accepted} of {attempts} attempts ({rate:.4} acceptance rate)")]
    Budget {
        what: String,
        accepted: usize,
        attempts: usize,
        rate: f64,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
