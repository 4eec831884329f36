use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// The variants are grouped by how a caller is expected to react: shape and
/// contract errors are programming mistakes, configuration errors come from
/// user input, and the I/O family from files on disk.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Dimension {
        op: &'static str,
        detail: String,
    },
    /// A caller broke an API precondition.
    Contract(String),
    /// User-supplied configuration is invalid.
    Config(String),
    /// A metric is undefined for the given inputs (e.g. AUC with one class).
    Evaluation(String),
    Io {
        path: PathBuf,
        source: io::Error,
    },
    /// A dataset index or raster file is malformed.
    Format {
        path: PathBuf,
        detail: String,
    },
    /// Stored checksum does not match the payload.
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },
    /// Stored weights do not fit the expected network configuration.
    ShapeMismatch {
        parameter: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    Json(serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// True for errors caused by user configuration or input files rather
    /// than a failure while running.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Checksum { .. }
                | Error::ShapeMismatch { .. }
                | Error::Io { .. }
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Evaluation(msg) => write!(f, "evaluation error: {msg}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { path, detail } => write!(f, "{}: {detail}", path.display()),
            Error::Checksum { path, stored, computed } => {
                write!(f, "{}: checksum mismatch (stored {stored:016x}, computed {computed:016x})", path.display())
            }
            Error::ShapeMismatch { parameter, expected, found } => {
                write!(f, "parameter {parameter}: expected shape {expected:?}, found {found:?}")
            }
            Error::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
