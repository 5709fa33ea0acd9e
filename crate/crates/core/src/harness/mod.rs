//! Run orchestration: configuration, optimiser, checkpoints and training.

pub mod checkpoint;
pub mod config;
pub mod gradients;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, RunState};
pub use config::{DataSource, TrainConfig};
pub use gradients::{gradient_suite, worst_case, GradCase, GRAD_STEP, GRAD_TOLERANCE};
pub use optim::Sgd;
pub use train::{evaluate_checkpoint, load_data, TrainSummary, Trainer};
