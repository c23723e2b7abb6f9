//! FSQ-quantized cross-attention for retrieving entries from large contextual biasing
//! catalogues.

pub mod attention;
pub mod bench;
pub mod catalogue;
pub mod error;
pub mod eval;
pub mod format;
pub mod fsq;
pub mod linalg;
pub mod retrieval;
pub mod ste;

pub use error::{Error, FormatError, Result};
