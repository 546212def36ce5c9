use thiserror::Error;

use tensorlab::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("corpus {0} has no captions")]
    EmptyCorpus(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token sequence has no [EOS]")]
    MissingEos,
    #[error("pair {pair} already recorded in the epoch {epoch} bank")]
    DuplicateWrite { pair: usize, epoch: usize },
    #[error("pair index {pair} outside a bank of {len}")]
    PairOutOfRange { pair: usize, len: usize },
    #[error("similarity bank for epoch {epoch} is incomplete ({filled}/{len})")]
    IncompleteBank {
        epoch: usize,
        filled: usize,
        len: usize,
    },
    #[error("thresholds were derived for the {have} scheme, elimination asked for {want}")]
    SchemeMismatch {
        have: &'static str,
        want: &'static str,
    },
    #[error("every row of the batch was eliminated")]
    AllRowsEliminated,
    #[error("query {0} has no correct target")]
    EmptyTruth(usize),
    #[error("{0}")]
    Shape(String),
    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::EmptyText => "empty_text",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::Config(_) => "config",
            Error::MissingEos => "missing_eos",
            Error::DuplicateWrite { .. } => "duplicate_write",
            Error::PairOutOfRange { .. } => "pair_out_of_range",
            Error::IncompleteBank { .. } => "incomplete_bank",
            Error::SchemeMismatch { .. } => "scheme_mismatch",
            Error::AllRowsEliminated => "all_rows_eliminated",
            Error::EmptyTruth(_) => "empty_truth",
            Error::Shape(_) => "shape",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
