//! Crate-wide error type.
//!
//! Variants are grouped by how a driver should react: configuration and
//! input problems, violated simulator contracts (bugs in the caller's
//! microcode, bad geometry), and verification mismatches. The CLI maps
//! these groups onto its stable exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid machine geometry (zero depth/width, bad long_step, overflow).
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A precondition of an instruction or microcode operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An in-place truth-table pass whose entry order is not hazard-free.
    #[error("hazardous in-place table: {0}")]
    Hazard(String),

    /// Field layout problems: overlapping fields, widths that do not fit.
    #[error("field map error: {0}")]
    FieldMap(String),

    /// A weight does not fit the declared wordlength.
    #[error("quantization error at ({row},{col}): value {value} outside {bits}-bit two's complement range")]
    Quantization {
        row: usize,
        col: usize,
        value: i64,
        bits: u32,
    },

    /// The row-flag vector does not follow the block grammar.
    #[error("flag violation at PU {pu}: expected {expected}, found {actual}")]
    FlagViolation {
        pu: usize,
        expected: String,
        actual: String,
    },

    /// Bad configuration or input files.
    #[error("config error: {0}")]
    Config(String),

    /// Simulator output disagrees with the reference pipeline.
    #[error("verification mismatch: {0}")]
    Verify(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 1 config/input, 2 internal contract, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Quantization { .. } | Error::FieldMap(_) => 1,
            Error::Geometry(_)
            | Error::Contract(_)
            | Error::Hazard(_)
            | Error::FlagViolation { .. } => 2,
            Error::Verify(_) => 3,
        }
    }
}
