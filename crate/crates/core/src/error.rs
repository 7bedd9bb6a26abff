use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PsrnnError>;

#[derive(Debug, Error)]
pub enum PsrnnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ALS normal equations for mode {mode} are singular after ridge repair")]
    SingularUpdate { mode: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("sequence {index} has length {len}, need at least {need}")]
    SequenceTooShort { index: usize, len: usize, need: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("normalization underflow: pre-normalization norm {norm:e} below 1e-12")]
    NormalizationUnderflow { norm: f64 },

    #[error("normalization matrix is singular after regularization")]
    SingularNormalizer,

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("observation {symbol} at step {step} has zero probability under the model")]
    ZeroProbabilityObservation { step: usize, symbol: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("{file}: row {row} has {found} columns, expected {expected}")]
    RaggedRows {
        file: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{file}: non-numeric value {value:?} at row {row}, column {col}")]
    NonNumeric {
        file: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PsrnnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PsrnnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PsrnnError::Io { .. } => 2,
            PsrnnError::Config(_) | PsrnnError::InvalidArgument(_) => 3,
            PsrnnError::ModelFormat(_) => 4,
            PsrnnError::EmptyCorpus
            | PsrnnError::RaggedRows { .. }
            | PsrnnError::NonNumeric { .. }
            | PsrnnError::EmptyData(_)
            | PsrnnError::SequenceTooShort { .. }
            | PsrnnError::DegenerateSample(_) => 5,
            PsrnnError::DimensionMismatch(_) => 6,
            PsrnnError::SingularUpdate { .. }
            | PsrnnError::NumericalFailure(_)
            | PsrnnError::SingularNormalizer
            | PsrnnError::NormalizationUnderflow { .. }
            | PsrnnError::ZeroProbabilityObservation { .. } => 7,
            PsrnnError::NonFiniteGradient { .. } => 8,
            PsrnnError::Json(_) => 9,
        }
    }
}

pub(crate) fn check_dim(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(PsrnnError::DimensionMismatch(format!(
            "{what}: expected {expected}, found {found}"
        )));
    }
    Ok(())
}
