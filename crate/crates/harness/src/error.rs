//! Harness-level errors, mapped onto process exit codes by the CLI.

use dnas_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage dependency missing: {0}")]
    StageDependency(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Core(CoreError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Configuration(m) => HarnessError::Config(m),
            CoreError::NonFinite(m) => HarnessError::Numeric(m),
            CoreError::Format { offset, message } => HarnessError::Format { offset, message },
            other => HarnessError::Core(other),
        }
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Config(format!("bad JSON: {e}"))
    }
}

impl HarnessError {
    /// Process exit code: 2 configuration, 3 stage dependency, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Format { .. } => 2,
            HarnessError::StageDependency(_) => 3,
            HarnessError::Numeric(_) => 4,
            HarnessError::Core(CoreError::Configuration(_)) => 2,
            HarnessError::Core(CoreError::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract()  {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(
            HarnessError::Format {
                offset: 0,
                message: "x".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(HarnessError::StageDependency("x".into()).exit_code(), 3);
        assert_eq!(HarnessError::Numeric("x".into()).exit_code(), 4);
        assert_eq!(
            HarnessError::from(CoreError::NonFinite("x".into())).exit_code(),
            4
        );
        assert_eq!(
            HarnessError::from(CoreError::Configuration("x".into())).exit_code(),
            2
        );
    }
}
