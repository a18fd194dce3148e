//! Optimization, schedules, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod schedule;
mod trainer;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use schedule::{cosine_lr, Schedule};
pub use trainer::{train, TrainConfig, TrainHistory, TrainMode, Trainable};
