use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{msg} at line {line}")]
    Parse { line: usize, msg: String },

    #[error("metadata not found: {}", .0.display())]
    MetadataNotFound(PathBuf),

    #[error("unsupported checkpoint format {found:?}, expected {expected:?}")]
    Version { expected: String, found: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("index {index} out of range [{lo}, {hi}]")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::Index { .. } => 2,
            Error::Numeric(_) => 4,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::MetadataNotFound(_)
            | Error::Version { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
        }
    }
}
