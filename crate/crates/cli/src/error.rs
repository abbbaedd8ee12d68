use std::fmt;
use std::process::ExitCode;

/// Failure of a CLI run, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad command line (exit 1).
    Usage(String),
    /// Invalid or incomplete configuration or input file (exit 2).
    Config(String),
    /// Numerical failure or failed verdict (exit 3).
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Failure(_) => 3,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Failure(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Library errors raised while running an experiment are failures.
impl From<weaksens::Error> for CliError {
    fn from(e: weaksens::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

/// Marks library errors raised while reading configuration as config errors.
pub trait ConfigContext<T> {
    fn config(self, what: &str) -> Result<T, CliError>;
}

impl<T> ConfigContext<T> for weaksens::Result<T> {
    fn config(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(format!("{what}: {e}")))
    }
}
