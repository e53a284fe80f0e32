use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed MOFid {raw:?}: {reason}")]
    MalformedMofId { raw: String, reason: String },

    #[error("untokenizable character {ch:?} at byte {offset} in {smiles:?}")]
    UntokenizableCharacter { smiles: String, ch: char, offset: usize },

    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,

    #[error("invalid vocabulary file: {0}")]
    VocabFormat(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("every key is masked for query row {0}")]
    AllMasked(usize),

    #[error("positional encoding needs an even dimension, got {0}")]
    OddDimension(usize),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenIdOutOfRange { id: usize, vocab_size: usize },

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed CIF: {0}")]
    MalformedCif(String),

    #[error("degenerate embedding column {column} (norm {norm:e})")]
    DegenerateColumn { column: usize, norm: f64 },

    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("non-finite loss at {context}")]
    NanLoss { context: String },

    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data { path: path.into(), reason: reason.into() }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidConfig(_) | Error::OddDimension(_) => 1,
            Error::NanLoss { .. } | Error::NonFinite(_) | Error::DegenerateColumn { .. } => 3,
            _ => 2,
        }
    }
}
