// SPDX-License-Identifier: MIT OR Apache-2.0

//! Process exit codes. These are part of the command-line contract.

use langsteer::Error;

pub const OK: u8 = 0;
/// Anything not covered below (I/O failures, internal errors).
pub const FAILURE: u8 = 1;
/// A required input file is missing or unreadable.
pub const MISSING_INPUT: u8 = 2;
pub const UNKNOWN_MODEL: u8 = 3;
/// Not enough data to fit or query (too few samples, rank, empty reference,
/// no active dimensions, degenerate series).
pub const INSUFFICIENT_SAMPLES: u8 = 4;
pub const PACK_MODEL_MISMATCH: u8 = 5;
/// Bad flags, config values or malformed input records.
pub const INVALID_CONFIG: u8 = 6;
/// Steering pack is corrupt or of an unsupported version.
pub const BAD_PACK: u8 = 7;
/// More than 10% of benchmark records were malformed.
pub const TOO_MANY_SKIPPED: u8 = 8;
pub const DETECTOR_FAILURE: u8 = 9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing input: {0}")]
    Missing(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Missing(_) => MISSING_INPUT,
                CliError::Config(_) => INVALID_CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return code_for_lib(e);
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return io_code(e);
        }
    }
    FAILURE
}

fn io_code(e: &std::io::Error) -> u8 {
    match e.kind() {
        std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => MISSING_INPUT,
        _ => FAILURE,
    }
}

fn code_for_lib(e: &Error) -> u8 {
    match e {
        Error::UnknownModel(_) | Error::InvalidModel(_) => UNKNOWN_MODEL,
        Error::InsufficientSamples(_)
        | Error::RankError { .. }
        | Error::NoActiveDimensions { .. }
        | Error::EmptyReference
        | Error::DegenerateSeries(_) => INSUFFICIENT_SAMPLES,
        Error::PackModelMismatch(_) => PACK_MODEL_MISMATCH,
        Error::CorruptPack(_) | Error::UnsupportedVersion { .. } => BAD_PACK,
        Error::TooManySkipped { .. } => TOO_MANY_SKIPPED,
        Error::Detector(_) => DETECTOR_FAILURE,
        Error::Io(io) => io_code(io),
        Error::InvalidInput(_)
        | Error::EmptyPool
        | Error::ZeroNorm
        | Error::DimError { .. }
        | Error::LayerOutOfRange { .. }
        | Error::InvalidToken { .. }
        | Error::SequenceTooLong { .. }
        | Error::UnknownLanguage(_)
        | Error::Json(_) => INVALID_CONFIG,
    }
}
