use std::fmt;

/// Failure of a command, mapped onto its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, unreadable input or unwritable output: exit 2.
    Config(String),
    /// A check or a training run failed: exit 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Failed(msg) => write!(f, "failed: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}
