use std::fmt;

/// CLI-facing errors, split by exit code: configuration problems exit 2,
/// data / model / IO problems exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gazedec_core::Error> for CliError {
    fn from(e: gazedec_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
