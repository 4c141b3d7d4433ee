//! Losses, learning-rate schedule, optimizer, checkpoints and the training loop.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{
    architecture_mismatches, load_checkpoint, save_checkpoint, snapshot_params, Checkpoint, RngState,
};
pub use gradcheck::{check_gradients, dead_parameters, eval_gradients, eval_loss, sample_parameters, GradCheckRecord};
pub use loss::{bce_loss, total_loss, LossBreakdown, BCE_EPS};
pub use optim::Adam;
pub use schedule::lr_schedule;
pub use trainer::{
    epoch_order, evaluate_mae, load_model, predict_batch, predict_maps, score_inputs, train, TrainOptions, TrainRecord,
    TrainSummary, Trainer,
};

pub use crate::model::build_variant;
