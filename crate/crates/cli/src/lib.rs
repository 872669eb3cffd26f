pub mod config;
pub mod heatmap;

use std::fmt;
use std::path::Path;

/// Error shown to CLI users; every message names the failing module.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn new(msg: impl fmt::Display) -> Self {
        CliError(format!("[cli] {msg}"))
    }

    pub fn path(path: &Path, e: impl fmt::Display) -> Self {
        CliError(format!("[cli] {}: {e}", path.display()))
    }
}

impl From<crossrisk::Error> for CliError {
    fn from(e: crossrisk::Error) -> Self {
        CliError(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
