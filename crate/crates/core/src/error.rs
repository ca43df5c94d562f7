//! Error type shared by every module, with the CLI exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RossError {
    /// Invalid configuration or out-of-range parameter.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation precondition (empty batch, mismatched lengths, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("data load error at byte {offset}: {message}")]
    DataLoad { offset: u64, message: String },

    /// First NaN/Inf encountered. The run aborts here.
    #[error("numeric failure in {context}")]
    Numeric { context: String },

    /// An executable invariant (mixing matrix, power decay, recursions) did not hold.
    #[error("invariant failure: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RossError {
    pub fn config(msg: impl Into<String>) -> Self {
        RossError::Config(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        RossError::Precondition(msg.into())
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        RossError::Numeric {
            context: context.into(),
        }
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        RossError::Invariant(msg.into())
    }

    pub fn data_load(offset: u64, message: impl Into<String>) -> Self {
        RossError::DataLoad {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the `ross` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            RossError::Config(_) | RossError::Precondition(_) | RossError::Io(_) => 1,
            RossError::DataLoad { .. } => 2,
            RossError::Numeric { .. } => 3,
            RossError::Invariant(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, RossError>;
