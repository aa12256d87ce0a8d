//! Toy conditional learned video codec.
//!
//! Temporal contexts mined from the previous reconstruction condition a
//! contextual encoder/decoder. Two adaptation modules sit on top:
//! confidence gating of the contexts ([`pqa`]) and per-position dynamic
//! filters generated from the reference frame ([`rqa`]). Training runs a
//! staged rate-distortion schedule ending in a repeat-long cascade, and
//! the bitstream is produced by a real range coder.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod pqa;
pub mod rqa;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
