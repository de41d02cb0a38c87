use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor rank or extent is wrong for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Real tensor where complex was required, or vice versa.
    #[error("dtype error: {0}")]
    Dtype(String),

    /// Shapes of two operands do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or non-finite value surfaced where the algorithm cannot proceed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Semantically invalid configuration (bad range, unknown key, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input that never reached semantic validation.
    #[error("parse error: {0}")]
    Parse(String),

    /// Corrupt tensor file; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    /// serde reports unknown fields through the same error type as syntax
    /// problems; keep them apart so callers can tell a typo'd key (config
    /// error, names the key) from broken JSON (parse error, has line/column).
    fn from(e: serde_json::Error) -> Self {
        let msg = e.to_string();
        if msg.starts_with("unknown field") || msg.starts_with("unknown variant") {
            Error::Config(msg)
        } else {
            Error::Parse(msg)
        }
    }
}
