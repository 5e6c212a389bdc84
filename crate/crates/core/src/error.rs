use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    Dim {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error at line {line}, field `{field}`: {message}")]
    Validation {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("vocabulary mismatch: checkpoint has hash {expected}, current vocabulary has hash {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
