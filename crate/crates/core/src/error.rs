//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("recording too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("degenerate axis {axis}: std {std:e} is below 1e-9")]
    DegenerateAxis { axis: usize, std: f64 },

    #[error("degenerate spectral channel {channel}: std {std:e} is below 1e-9")]
    DegenerateChannel { channel: usize, std: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage order error: {0}")]
    StageOrder(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("artifact format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 1 configuration, 2 stage order, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::StageOrder(_) => 2,
            Error::Numerical(_)
            | Error::DegenerateAxis { .. }
            | Error::DegenerateChannel { .. } => 3,
            _ => 1,
        }
    }
}
