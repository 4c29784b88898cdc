use std::path::PathBuf;

/// Errors raised anywhere in the discovery pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("row {row}: expected {expected} embedding values, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: label {label} out of range (must be < {limit})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        limit: usize,
    },

    #[error("dataset file {0} contains no rows")]
    EmptyDataset(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("known class {class} ended up with zero labeled samples")]
    EmptyKnownClass { class: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: total loss {loss} (first epoch {first})")]
    Diverged { epoch: usize, loss: f64, first: f64 },

    #[error("checkpoint {what} {checkpoint} does not match dataset {what} {dataset}")]
    CheckpointMismatch {
        what: &'static str,
        checkpoint: usize,
        dataset: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::Numerical(_) => 3,
            Error::Io { .. } => 4,
            Error::Csv(e) if e.is_io_error() => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
