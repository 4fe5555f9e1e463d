use std::io;

use thiserror::Error;

/// Errors raised by the predistortion toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence too short: need at least {needed} samples, got {got}")]
    Length { needed: usize, got: usize },

    #[error("sequence lengths incompatible: {0}")]
    Alignment(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate weight: recursion breaks down at moment index {moment_index}")]
    Rank { moment_index: usize },

    #[error("structure mismatch: expected {expected}, found {found}")]
    Structure {
        expected: &'static str,
        found: &'static str,
    },

    #[error("cannot normalize: {0}")]
    Normalization(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Length { .. } | Error::Alignment(_) => "length",
            Error::Domain(_) => "domain",
            Error::InvalidConfig(_) => "config",
            Error::Rank { .. } => "rank",
            Error::Structure { .. } => "structure",
            Error::Normalization(_) => "normalization",
            Error::Parse { .. } | Error::Version { .. } => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
