use thiserror::Error;

use crate::gateway::GatewayError;
use crate::store::StoreError;
use crate::verify::VerifyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Verify(#[from] VerifyError),

    #[error("hook failed: {0}")]
    Hook(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Short machine-readable code used in CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Gateway(_) => "gateway",
            Error::Store(_) => "store",
            Error::Verify(_) => "verify",
            Error::Hook(_) => "hook",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
