use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    ConfigInvalid { key: String, msg: String },
    #[error("cannot read config {0}")]
    ConfigRead(String),
    #[error(transparent)]
    Numerical(#[from] ovfilt_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 1 for I/O. Malformed trajectory files count as
    /// configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::ConfigParse { .. } | BenchError::ConfigInvalid { .. } | BenchError::ConfigRead(_) => 2,
            BenchError::Numerical(ovfilt_core::Error::Io(_)) => 1,
            BenchError::Numerical(ovfilt_core::Error::Format(_)) => 2,
            BenchError::Numerical(_) => 3,
            BenchError::Io(_) => 1,
        }
    }
}
