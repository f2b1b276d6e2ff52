use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems found while decoding one file. Binary formats report byte
/// offsets, text formats report 1-based line numbers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at byte 0, expected {expected:?}")]
    BadMagic { found: String, expected: &'static str },
    #[error("unsupported format version {found} at byte 4 (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("{count} unexpected trailing bytes at byte {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },
    #[error("invalid {what} at byte {offset}: {message}")]
    Invalid {
        offset: usize,
        what: &'static str,
        message: String,
    },
    #[error("line {line}: header must be `{expected}`, found `{found}`")]
    Header {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: {message}")]
    Field { line: usize, message: String },
    #[error("line {line}: duplicate {what} `{id}`")]
    Duplicate {
        line: usize,
        what: &'static str,
        id: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ghanet_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }

    /// 1 for anything the user can fix in their inputs, 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        use ghanet_core::Error as E;
        match self {
            Error::Format { .. } | Error::Json { .. } | Error::Invalid(_) => 1,
            Error::Model(E::Config(_) | E::Contract(_) | E::Dimension { .. }) => 1,
            Error::Io { .. } | Error::Model(_) | Error::Failed(_) => 2,
        }
    }
}
