use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// The variants are coarse on purpose: the CLI maps each one to a distinct
/// exit code, so a new variant is a new public error category.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A class/label/token index is outside its valid range.
    #[error("label error: {0}")]
    Label(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Inconsistent or invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Sequence does not fit the available budget.
    #[error("length error: {0}")]
    Length(String),

    /// Persisted data is corrupt or does not match its manifest.
    #[error("format error: {0}")]
    Format(String),

    /// Optimization produced a non-finite value.
    #[error("training error: {0}")]
    Training(String),

    /// Metric undefined for the given inputs (e.g. AUC with one class).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("schema error in {path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable name for the category, used in machine-readable output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Label(_) => "label",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Length(_) => "length",
            Error::Format(_) => "format",
            Error::Training(_) => "training",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Schema { .. } => "schema",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "missing-file"
            }
            Error::Io { .. } => "io",
        }
    }
}
