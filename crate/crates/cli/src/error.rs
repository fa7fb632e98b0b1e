use std::fmt;
use std::path::Path;

/// A command failure with a stable, machine-readable category.
#[derive(Debug)]
pub struct CliError {
    category: &'static str,
    message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("config", message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::new("io", format!("{}: {err}", path.display()))
    }

    pub fn category(&self) -> &'static str {
        self.category
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    /// Process exit status for this category. Usage errors from argument
    /// parsing exit with 2 before any of these apply.
    pub fn exit_code(&self) -> i32 {
        match self.category {
            "config" => 3,
            "io" => 4,
            "format" => 5,
            "numerical" => 6,
            "capacity" => 7,
            "invalid-argument" => 8,
            "oracle-mismatch" => 9,
            "reproducibility" => 10,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<gkd_core::Error> for CliError {
    fn from(e: gkd_core::Error) -> Self {
        CliError::new(e.category(), e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
