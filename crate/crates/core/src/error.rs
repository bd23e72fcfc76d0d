use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("domain error in {op} at index {index}: operand {value}")]
    Domain { op: &'static str, index: usize, value: f64 },

    #[error("empty reduction: {0}")]
    EmptyReduction(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("sample-size error: {0}")]
    SampleSize(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
