use std::fmt;

use circuitfn::corpus::CorpusError;
use circuitfn::nn::NnError;
use circuitfn::tasks::TaskError;

/// Failure classes with stable exit codes: 2 usage or validation, 3 I/O,
/// 4 numeric.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TaskError::Corpus(c) => c.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Usage(e.to_string())
    }
}
