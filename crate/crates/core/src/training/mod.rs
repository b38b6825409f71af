//! Losses, optimizer, checkpoints and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use loss::{gaussian_target, heatmap_loss, offset_loss, total_loss, total_loss_var, HeatmapNorm, LossBreakdown};
pub use optim::{adam_step, lr_schedule, OptimState};
pub use trainer::{
    batch_gradients, sample_objective, train, train_with, write_history_csv, LossConfig, PreparedSample, StepRecord,
    TrainConfig, TrainOutcome,
};
