//! The conditional inter-frame codec: motion path, context mining,
//! PQA/RQA-enhanced contextual coding and sequence-level entropy coding.

pub mod graph;
pub mod model;
pub mod sequence;

pub use graph::{CodedLatent, Mode, PFrame, Quantizer, Reference, TemporalContexts};
pub use model::{Group, ModelConfig, ModelState, Net, Param};
pub use sequence::{decode_sequence, encode_sequence, is_intra, EncodeStats, Encoded};
