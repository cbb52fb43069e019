//! Failure classification for the command-line front end.
//!
//! Exit codes form the contract with scripts driving the binary:
//! `0` success, `2` configuration error, `3` numerical or I/O failure,
//! `4` a structurally non-identifiable request.

use aggrekit_core::error::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The configuration could not be read, parsed, or validated.
    #[error("config error: {0}")]
    Config(String),

    /// A computation stage failed inside the core library.
    #[error(transparent)]
    Core(#[from] CoreError),

    /// Filesystem trouble around the run directory.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Adapter for `map_err`: wrap an I/O error with the path or action that
    /// produced it.
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// Process exit code this failure maps to.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(CoreError::NonIdentifiable(_)) => 4,
            _ => 3,
        }
    }
}
