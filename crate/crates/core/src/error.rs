use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown modality index {index} (model has {count})")]
    UnknownModality { index: usize, count: usize },

    #[error("format error in {path} at byte offset {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("refusing to overwrite existing path {0}")]
    Exists(PathBuf),

    #[error("statistic refused: {0}")]
    Statistic(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI to pick an exit code.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownModality { .. } => 3,
            Error::Io { .. } | Error::Exists(_) => 4,
            Error::Format { .. } | Error::Json(_) => 5,
            Error::Shape { .. } | Error::Statistic(_) => 6,
        }
    }
}
