use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("expected 12 leads, header declares {0}")]
    LeadCountMismatch(usize),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("no records could be loaded from {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("signal needs at least 2 samples to resample, got {0}")]
    DegenerateSignal(usize),

    #[error("age {0} is outside [0, 130]")]
    InvalidAge(i64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("backward has already been run on this tape")]
    DoubleBackward,

    #[error("training diverged: non-finite loss in epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("checkpoint class map `{found}` does not match requested `{expected}`")]
    ModelClassMapMismatch { expected: String, found: String },

    #[error("challenge score normalization is degenerate (correct score equals inactive score)")]
    DegenerateNormalization,

    #[error("no rater pairs left after excluding unsure ratings")]
    NoDecisiveExamples,

    #[error("kappa is undefined: expected chance agreement is 1")]
    DegenerateMarginals,

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("invalid class map: {0}")]
    InvalidClassMap(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {msg}", .path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("{}: {source}", .path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::TrainingDiverged { .. }
            | Error::DegenerateNormalization
            | Error::DegenerateMarginals
            | Error::NoDecisiveExamples => true,
            Error::File { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
