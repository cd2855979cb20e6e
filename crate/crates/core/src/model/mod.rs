//! Encoder-decoder transformer, training and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod train;
pub mod transformer;

pub use loss::{loss, smoothed_cross_entropy};
pub use params::{average_checkpoints, ModelConfig, TransformerParams};
pub use schedule::noam_lr;
pub use train::{train, TrainConfig, TrainLogRecord, TrainOutcome};
pub use transformer::{forward, Batch};
