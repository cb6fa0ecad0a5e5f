use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("line {line}: {reason}")]
    FormatError { line: usize, reason: String },
    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),
    #[error("unknown fact-checker rating {0:?}")]
    UnknownRating(String),
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("record {0} has no gold label")]
    MissingLabel(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("vocabulary target size {target} is smaller than the {required} specials and characters")]
    TargetTooSmall { target: usize, required: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence length {len} is not divisible by pool size {pool}")]
    IndivisibleLength { len: usize, pool: usize },
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint was trained with a different vocabulary")]
    VocabHashMismatch,
    #[error("corrupt checkpoint at byte offset {0}")]
    CorruptFile(usize),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),

    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged: loss became NaN at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("prediction and gold lists differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no data for language slice {0:?}")]
    InsufficientData(String),
    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(line: usize, reason: impl Into<String>) -> Self {
        Error::FormatError {
            line,
            reason: reason.into(),
        }
    }
}
