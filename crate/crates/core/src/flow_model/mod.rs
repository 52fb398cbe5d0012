//! Conditional rectified-flow generator: schedule, velocity network,
//! synthetic dataset, pretraining and checkpoints.

mod checkpoint;
mod dataset;
mod network;
mod pretrain;
mod schedule;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use dataset::{render, render_dataset, ClassSpec, Color, DatasetConfig, RenderParams, Shape, ShapeDataset};
pub use network::{Architecture, ForwardCache, VelocityField, IMAGE_CHANNELS, TIME_FEATURES};
pub use pretrain::{
    moving_average, pretrain_flow, sample_batch, FlowExample, FlowMatchingLoss, PretrainConfig, PretrainReport,
};
pub use schedule::{velocity_to_score, FlowSchedule, DEFAULT_T_FLOOR};
