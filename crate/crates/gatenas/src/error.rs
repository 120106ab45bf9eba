use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gatenas_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// Invalid configuration value, with the dotted key path.
    #[error("{file}:{line}: {}{message}", key_prefix(key))]
    Config { file: String, line: usize, key: String, message: String },
    /// Malformed binary file.
    #[error("{file}: byte {offset}: {message}")]
    Format { file: String, offset: u64, message: String },
    /// Malformed text file.
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("interrupted after {stage} epoch {epoch}")]
    Interrupted { stage: String, epoch: usize },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Short machine-parsable category printed by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Io { .. } => "io",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Parse { .. } => "parse",
            Error::Interrupted { .. } => "interrupted",
            Error::Usage(_) => "usage",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

fn key_prefix(key: &str) -> String {
    if key.is_empty() {
        String::new()
    } else {
        format!("`{key}`: ")
    }
}
