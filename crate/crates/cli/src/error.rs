use std::fmt;

use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Computation,
    Transport,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Computation => 3,
            ErrorKind::Transport => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Input => "input",
            ErrorKind::Computation => "computation",
            ErrorKind::Transport => "transport",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn input(msg: impl fmt::Display) -> Self {
        CliError { kind: ErrorKind::Input, error: anyhow::anyhow!("{msg}") }
    }

    pub fn computation(msg: impl fmt::Display) -> Self {
        CliError { kind: ErrorKind::Computation, error: anyhow::anyhow!("{msg}") }
    }

    pub fn transport(msg: impl fmt::Display) -> Self {
        CliError { kind: ErrorKind::Transport, error: anyhow::anyhow!("{msg}") }
    }

    /// The machine-readable record printed on stderr.
    pub fn record(&self, command: &str) -> serde_json::Value {
        json!({
            "error": {
                "kind": self.kind.as_str(),
                "exit_code": self.kind.exit_code(),
                "command": command,
                "message": format!("{:#}", self.error),
            }
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {:#}", self.kind.as_str(), self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a library error with the exit class it maps to.
pub trait Classify<T> {
    fn input_err(self, context: &str) -> CliResult<T>;
    fn compute_err(self, context: &str) -> CliResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn input_err(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError { kind: ErrorKind::Input, error: e.into().context(context.to_string()) })
    }

    fn compute_err(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError { kind: ErrorKind::Computation, error: e.into().context(context.to_string()) })
    }
}
