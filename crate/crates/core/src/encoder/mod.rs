//! The shared dual encoder, its ranking loss, optimizer, schedules and
//! checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{batch_loss, loss_and_grad, BatchNegative, LossOptions, TrainBatch, TrainExample};
pub use model::{hash_text, hash_token, EncoderConfig, EncoderModel, Gradient, Params};
pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use schedule::{LrSchedule, ScheduleKind};
