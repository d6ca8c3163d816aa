//! Command line front end: config files, batch runs and charts.

pub mod config;
pub mod runner;
pub mod svg;

use sthfl_core::{Error, ErrorCategory};

/// Process exit status for a failed command.
pub fn exit_code(error: &Error) -> i32 {
    match error.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Protocol => 4,
        ErrorCategory::Io => 5,
    }
}
