use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("training data contaminated: record {record} is labelled abnormal")]
    Contamination { record: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("{path}: parse error in {field}: {detail}")]
    Parse {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset error at {record}: {detail}")]
    Dataset { record: String, detail: String },

    #[error("checkpoint {field}: {detail}")]
    Checkpoint { field: &'static str, detail: String },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("theory check failed: {0}")]
    TheoryCheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Cell { source, .. } => source.exit_code(),
            Error::Contamination { .. } => 3,
            Error::ArchMismatch(_) => 4,
            Error::MissingArtifact { .. } => 5,
            Error::TheoryCheck(_) => 6,
            _ => 2,
        }
    }
}
