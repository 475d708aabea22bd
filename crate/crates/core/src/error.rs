use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("parse error in {}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("committee incomplete: missing expert {0}")]
    CommitteeIncomplete(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("expert {expert} failed: {source}")]
    Expert {
        expert: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{}: {source}", path.display())]
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

    pub fn parse(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Layout(_) | Error::Split(_) | Error::Json(_) => {
                ErrorClass::Config
            }
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::Label(_)
            | Error::Checkpoint(_)
            | Error::CommitteeIncomplete(_) => ErrorClass::Data,
            Error::Expert { source, .. } => source.class(),
            _ => ErrorClass::Training,
        }
    }
}
