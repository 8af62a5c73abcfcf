use std::fmt;

/// Runner failures, split by exit code: configuration problems exit 1,
/// numerical failures during an accepted run exit 2.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable, unparsable, or semantically invalid configuration; also
    /// covers filesystem trouble around inputs and outputs.
    Config(String),
    /// The run itself failed: no convergence, incompatible data, stiffness.
    /// Carries the library error text.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Wraps a library error that indicates bad inputs.
pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Wraps a library error raised while running the actual computation.
pub fn numeric_err(e: impl fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}
