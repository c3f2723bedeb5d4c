use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Input-domain errors from the library are reported as config errors.
    pub fn config(e: eqsel_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(1),
            CliError::Numeric(_) | CliError::Io(_) => ExitCode::from(2),
        }
    }
}

impl From<eqsel_core::Error> for CliError {
    fn from(e: eqsel_core::Error) -> Self {
        match e {
            eqsel_core::Error::Domain(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
