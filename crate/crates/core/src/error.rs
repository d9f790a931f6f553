use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report. Variants are grouped by the CLI exit
/// code they map to (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("singularity in {op}: divisor magnitude below 1e-12 at positions {positions:?}")]
    Singularity { op: &'static str, positions: Vec<usize> },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("imputation error: joint {joint} is below the confidence threshold in every frame")]
    Imputation { joint: usize },

    #[error("topology error: induced subgraph is disconnected, components {components:?}")]
    Topology { components: Vec<Vec<usize>> },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("version mismatch: file has {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

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

    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => 1,
            Error::Dimension { .. }
            | Error::Singularity { .. }
            | Error::Numerical(_)
            | Error::Backward(_) => 3,
            Error::Format { .. }
            | Error::Imputation { .. }
            | Error::Topology { .. }
            | Error::Data(_)
            | Error::ModelFile(_)
            | Error::Version { .. }
            | Error::Io { .. } => 2,
        }
    }
}
