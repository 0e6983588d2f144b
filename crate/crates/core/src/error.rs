use thiserror::Error;

/// Failure categories shared by every module.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("singular closed form: {0}")]
    SingularCase(String),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, residual: f64) -> Self {
        Error::Numerical {
            message: message.into(),
            residual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
