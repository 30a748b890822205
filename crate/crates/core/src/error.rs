use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("degenerate vector")]
    DegenerateVector,

    #[error("zero-norm statistic")]
    ZeroNormStatistic,

    #[error("degenerate feature at index {0}")]
    DegenerateFeature(usize),

    #[error("absent class")]
    AbsentClass,

    #[error("no prototypes")]
    NoPrototypes,

    #[error("no alignable classes")]
    NoAlignableClasses,

    #[error("empty supervision")]
    EmptySupervision,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("unstable probe: non-finite loss while perturbing `{input}` at {index}")]
    UnstableProbe { input: String, index: usize },

    #[error("missing gradient for input `{0}`")]
    MissingGradient(String),

    #[error("eigensolver did not converge after {iterations} iterations (n = {n})")]
    EigenNonConvergence { iterations: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("numeric abort at iteration {iter}: {diagnostics}")]
    NonFinite { iter: usize, diagnostics: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
