use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Each variant knows the module it originates from so command-line front
/// ends can report it next to the message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },
    #[error("undefined similarity: zero-norm input")]
    UndefinedSimilarity,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("overlapping spans on line {line}: {msg}")]
    Overlap { line: usize, msg: String },
    #[error("empty prompt{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    EmptyPrompt { line: Option<usize> },
    #[error("range error: {0}")]
    Range(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("empty cache: sparse attention needs at least one retained token")]
    EmptyCache,
    #[error("empty retrieval: no clips to build an anchor from")]
    EmptyRetrieval,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("reference error: first chunk score {0} is not positive")]
    Reference(f64),
    #[error("corrupt file at byte offset {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Name of the module that raised this error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::DegenerateRow { .. } | Error::UndefinedSimilarity => {
                "numerics"
            }
            Error::Parse { .. } | Error::Overlap { .. } | Error::EmptyPrompt { .. } => "narrative",
            Error::Range(_) | Error::Index { .. } | Error::EmptyCache => "sparse_cache",
            Error::EmptyRetrieval => "flow",
            Error::Config(_) | Error::State(_) => "pipeline",
            Error::Size(_) | Error::Reference(_) => "nrdp",
            Error::Corrupt { .. } | Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
