//! Error type carrying the process exit code.

use std::fmt;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<bayesfair::Error> for CliError {
    fn from(e: bayesfair::Error) -> Self {
        use bayesfair::Error as E;
        let code = match &e {
            E::Config(_) | E::Dimension { .. } => EXIT_CONFIG,
            E::Training(_) => EXIT_TRAINING,
            E::Data(_) | E::Io { .. } | E::Json(_) | E::Csv(_) => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}
