use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// Every variant maps to a short stable code (see [`Error::code`]) so the
/// command-line front end can print a single greppable line per failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("unknown {kind} '{name}' (strict vocabulary)")]
    Vocab { kind: &'static str, name: String },

    #[error("{0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Divergence { epoch: usize, step: usize, what: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing dataset files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad sparse export: {0}")]
    SparseFormat(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "E_PARSE",
            Error::Vocab { .. } => "E_VOCAB",
            Error::Config(_) => "E_CONFIG",
            Error::Index(_) => "E_INDEX",
            Error::Shape(_) => "E_SHAPE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Divergence { .. } => "E_DIVERGED",
            Error::Empty(_) => "E_EMPTY",
            Error::MissingFiles(_) => "E_MISSING",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::SparseFormat(_) => "E_SPARSE",
            Error::Io { .. } => "E_IO",
            Error::Serde(_) => "E_SERDE",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
