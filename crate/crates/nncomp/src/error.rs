use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nncomp_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed input file; `offset` is the byte where parsing failed.
    #[error("{file}: {message} at byte {offset}")]
    Format { file: String, offset: u64, message: String },
    #[error("{file}: sha256 {actual} does not match expected {expected}")]
    Checksum { file: String, expected: String, actual: String },
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("encoding policy: {0}")]
    Policy(String),
    #[error("config: {0}")]
    Config(String),
    #[error("report: {0}")]
    Report(String),
    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
}

impl Error {
    pub fn format(file: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { file: file.into(), offset, message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
