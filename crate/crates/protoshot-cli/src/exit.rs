//! Error-to-exit-code policy.
//!
//! 0 success, 2 usage, 3 data/format, 4 numeric failure, 5 partial matrix
//! failure. Clap's own usage errors already exit with 2.

use protoshot::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_PARTIAL: i32 = 5;

pub fn code_for(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Format(_)
        | Error::CorruptRecord { .. }
        | Error::DuplicateId(_)
        | Error::Validation(_)
        | Error::SpecParse { .. }
        | Error::Sampling { .. }
        | Error::DimMismatch { .. } => EXIT_DATA,
        Error::Config(_) => EXIT_USAGE,
        Error::NonFiniteLoss { .. }
        | Error::Conditioning(_)
        | Error::DegeneratePrototype { .. }
        | Error::Contract(_) => EXIT_NUMERIC,
    }
}
