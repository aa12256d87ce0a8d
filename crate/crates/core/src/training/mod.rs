//! Losses, optimizer and the staged training schedule.

pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod schedule;

pub use adamw::AdamW;
pub use config::{CorpusConfig, StageConfig, TrainConfig};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use loss::{frame_loss, hierarchical_weight, loss_cascade, FrameTerms, LossKind, Rollout, LAMBDAS, WEIGHT_CYCLE};
pub use schedule::{full_schedule, run_schedule, scaled_schedule, Corpus, ScheduleStage, StageLog, Subset, Trainer};
