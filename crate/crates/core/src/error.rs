use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A hyperparameter or argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A call violated an API contract (wrong tape, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// The model does not fit the complexity budget.
    #[error("complexity budget exceeded: {0}")]
    Budget(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
