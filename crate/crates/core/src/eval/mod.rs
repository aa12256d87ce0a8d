//! Metrics, synthetic content, raw video I/O and the evaluation protocol.

pub mod ablation;
pub mod metrics;
pub mod protocol;
pub mod rawvideo;
pub mod synthetic;
