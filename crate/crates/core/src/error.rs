use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller-supplied data: wrong dimensions, non-finite values, codes out of range.
    #[error("invalid input: {0}")]
    Input(String),

    /// The quantizer or projection configuration cannot support the requested operation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An object was used in a state that no longer permits the operation.
    #[error("invalid state: {0}")]
    State(String),

    /// Stored data (packed words, index contents) is inconsistent.
    #[error("corrupt data: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while decoding a serialized index.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:02x?}")]
    BadMagic { found: [u8; 8] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("{section} checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        section: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("malformed index: {0}")]
    Malformed(String),
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
