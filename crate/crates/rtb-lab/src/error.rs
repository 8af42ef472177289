use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value showed up mid-computation. `op` names the
    /// operation that produced it.
    #[error("numeric error in `{op}`: {msg}")]
    Numeric { op: String, msg: String },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),

    #[error("empty buffer: fall back to on-policy sampling")]
    EmptyBuffer,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn numeric(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 divergence,
    /// 4 oracle mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::OracleMismatch(_) => 4,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
