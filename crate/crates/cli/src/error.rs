use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] intraloss::Error),
    #[error("gradient check failed:\n{0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config, 3 I/O, 4 numerical failure, 5 gradient check failure.
    pub fn exit_code(&self) -> i32 {
        use intraloss::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Gradcheck(_) => 5,
            CliError::Core(e) => match e {
                E::Io(_) | E::Csv(_) | E::Format { .. } => 3,
                E::NonFiniteLoss { .. } | E::DegenerateClass { .. } => 4,
                _ => 2,
            },
        }
    }
}
