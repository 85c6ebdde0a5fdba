//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit-code contract: `Config` and `Contract`
//! are caller errors (exit 2), `Data`/`Io`/`Csv` are data errors (exit 3),
//! `Numeric` is a numerical failure during computation (exit 4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unknown preset.
    #[error("config error: {0}")]
    Config(String),

    /// A function precondition was violated (dimension mismatch, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, undefined metrics, degenerate numerics.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Serde(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
