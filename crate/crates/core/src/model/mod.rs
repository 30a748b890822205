//! Segmenter, losses, optimizer and training loops.

pub mod checkpoint;
pub mod loss;
pub mod objective;
pub mod optim;
pub mod segmenter;
pub mod train;

pub use loss::{cross_entropy, segmentation_loss};
pub use objective::{
    check_objective_gradients, freeze, supervised_objective, total_objective, total_objective_with, Batch, Frozen,
    LossBreakdown, Objective, ObjectiveConfig,
};
pub use optim::{poly_lr, sgd_step, SgdState};
pub use segmenter::{ForwardPass, ParamGroup, Segmenter, PARAM_NAMES};
pub use train::{
    adapt, init_segmenter, self_train, train, train_with_classes, warmup, AdaptOptions, Checkpoint, Phase,
    SourceData, TrainError, TrainLog, TrainOutcome,
};
