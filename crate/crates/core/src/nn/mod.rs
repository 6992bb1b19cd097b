//! Minimal numerical network core: tensors, convolution, dense layers,
//! activations, loss, initialization, SGD with a plateau schedule, and
//! checkpoint persistence.

pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod init;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{Aggregation, Model, ModelConfig};
pub use optim::{SchedulerAction, SchedulerConfig, SchedulerState};
pub use tensor::{Real, Tensor};
pub use train::{train, LabeledSet, TrainConfig};
