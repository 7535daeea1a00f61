use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid score box at coordinate {index}: {reason}")]
    InvalidBox { index: usize, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("exhaustive enumeration supports at most {max} coordinates, got {k}")]
    TooLarge { k: usize, max: usize },

    #[error("interval division by a divisor whose lower endpoint {lo} is not positive")]
    NonPositiveDivisor { lo: f64 },

    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("enclosure saturated; result cannot be used for certification")]
    Saturated,

    #[error("shape error at `{field}`: {detail}")]
    Shape { field: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
