//! Network assembly, training, voting inference, metrics and the CLI.

mod checkpoint;
mod cli;
pub mod config;
pub mod gradsuite;
mod metrics;
mod network;
mod predict;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cli::run_cli;
pub use config::{Config, InferenceConfig, NetworkConfig, SegmentConfig, TrainConfig};
pub use metrics::{ClassMetrics, ConfusionMatrix, Metrics};
pub use network::{EncoderLevel, InputSeeds, NetInput, Network, INPUT_CHANNELS};
pub use predict::{argmax_rows, predict_with_voting, Prediction, VoteAccumulator};
pub use train::{calibrate_neighbors, prepare_cloud, train, EpochReport, TrainOptions, Trainer};
