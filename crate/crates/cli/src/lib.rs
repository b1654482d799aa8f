//! Experiment-runner library behind the `smoothinv` binary: configuration,
//! artifact envelopes, command implementations, and the gradient
//! verification suite. Split out of `main.rs` so integration tests can drive
//! whole experiments in-process.

pub mod artifacts;
pub mod config;
pub mod runner;
pub mod verify;

use smoothinv::Error;

/// Process exit codes used by the binary.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const VERIFICATION: i32 = 5;
}

/// Maps an error to the binary's exit code.
pub fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::InvalidArgument(_) | Error::InvalidState(_) | Error::DegenerateInput(_) => {
            exit_code::CONFIG
        }
        Error::Io(_) | Error::Parse { .. } | Error::Serde(_) => exit_code::IO,
        Error::Numeric { .. } | Error::TrainingDiverged { .. } => exit_code::NUMERIC,
    }
}
