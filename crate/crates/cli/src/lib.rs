//! Experiment orchestration behind the `gradsense` binary: config parsing,
//! the attack/verify/bench subcommand implementations, and exit-code
//! mapping.

pub mod commands;
pub mod config;
pub mod experiment;

/// Process exit codes of the binary.
pub mod exit_codes {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG_ERROR: i32 = 2;
    pub const RUNTIME_FAILURE: i32 = 3;
    pub const VERIFICATION_FAILURE: i32 = 4;
}

/// Top-level command failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { exit_code: exit_codes::CONFIG_ERROR, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { exit_code: exit_codes::RUNTIME_FAILURE, message: message.into() }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        CliError { exit_code: exit_codes::VERIFICATION_FAILURE, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}
