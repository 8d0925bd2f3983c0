use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes in the CLI:
/// config/usage problems exit 1, numeric aborts exit 2, IO failures exit 3.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error in {component}: {detail}")]
    Numeric { component: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numeric(component: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { component: component.into(), detail: detail.into() }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Contract(_) | Error::Format(_) => 1,
            Error::Numeric { .. } => 2,
            Error::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
