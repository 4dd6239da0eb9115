//! Configuration-driven experiment runner for `modality-lab`.
//!
//! Exit codes used by the `modlab` binary:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | usage error (bad command line) |
//! | 3 | configuration error |
//! | 4 | data error: I/O, checkpoint, malformed records, domain or contract violations |
//! | 5 | numeric error: non-finite values, diverged training |

pub mod commands;
pub mod config;
pub mod manifest;

use modality_lab::LabError;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Config(_) => EXIT_CONFIG,
        LabError::Domain(_)
        | LabError::Contract(_)
        | LabError::Checkpoint { .. }
        | LabError::Records { .. }
        | LabError::Io { .. }
        | LabError::Json(_) => EXIT_DATA,
        LabError::Numeric { .. } | LabError::Training { .. } => EXIT_NUMERIC,
        LabError::Internal(_) => EXIT_INTERNAL,
    }
}
