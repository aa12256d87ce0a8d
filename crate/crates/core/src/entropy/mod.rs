//! Rate model, range coder and container format.

pub mod bitstream;
pub mod laplace;
pub mod range_coder;

pub use bitstream::{Bitstream, FrameChunk, Header, InterPayload};
pub use laplace::{estimate_rate, laplace_bits, laplace_bits_var, LaplaceParams, B_MIN, P_MIN};
pub use range_coder::{quantized_bits, range_decode, range_encode, QuantizedCdf};
