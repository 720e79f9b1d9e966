use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown subcommand '{0}'")]
    UnknownCommand(String),
    #[error("unknown key '{key}' for {command}")]
    UnknownKey { command: String, key: String },
    #[error("config file has no entries")]
    EmptyConfig,
    #[error("invalid value '{value}' for '{key}': {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("check failed: {0}")]
    Assertion(String),
    #[error("timer too coarse: {0}")]
    TimerResolution(String),
    #[error(transparent)]
    Core(#[from] pdelab_core::Error),
    #[error(transparent)]
    Model(#[from] pdelab_transformer::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownCommand(_)
            | CliError::UnknownKey { .. }
            | CliError::EmptyConfig
            | CliError::InvalidValue { .. }
            | CliError::Parse { .. } => 2,
            CliError::Model(pdelab_transformer::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
