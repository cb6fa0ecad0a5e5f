//! Transformer encoder with a Conv1D + dense classification head.

pub mod checkpoint;
pub mod config;
pub mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::ModelConfig;
pub use network::{parameter_shapes, predict, ConvHeadTrace, HiddenStates, Model, Params, Prediction};
