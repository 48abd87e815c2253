//! Training loop, checkpoints, metrics and map rendering.

mod checkpoint;
mod config;
mod metrics;
mod render;
mod trainer;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use metrics::{ConfusionMatrix, Evaluation};
pub use render::render_map;
pub use trainer::{
    argmax, check_scene, evaluate, predict_classes, predict_map, read_history, train, write_history,
    EpochRecord, MapCoverage, Trainer,
};
