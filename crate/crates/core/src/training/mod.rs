//! Optimization loop, learning-rate schedule and early stopping.

pub mod early_stopping;
pub mod schedule;
pub mod trainer;

pub use early_stopping::{EarlyStopping, Verdict};
pub use schedule::LrSchedule;
pub use trainer::{
    batches_per_epoch, fit, fit_with, schedule_for, train_epoch, write_train_log, EpochRecord, EpochSummary,
    FitResult, TrainState, TRAIN_LOG_HEADER,
};
