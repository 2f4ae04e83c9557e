use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing files or malformed configuration.
    #[error("{0}")]
    Usage(String),
    /// The inputs were fine but the work itself failed.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub(crate) fn io_err(what: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", what.display()))
}
