//! Reverse-mode gradients through the unrolled feedback loop, plus the
//! optimizer and training driver.

mod optim;
mod params;
mod tape;
mod train;

pub use optim::{finite_diff_grad, Sgd};
pub use params::ModelParams;
pub use tape::{GradTape, NodeId, ScalarLoss};
pub use train::{
    estimate_map, mean_loss, record_objective, train, EpochRecord, LrSchedule, TrainConfig,
    TrainOutcome,
};
