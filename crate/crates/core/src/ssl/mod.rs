//! Teacher-student training: losses, centring, the method matrix, the
//! optimisation step and checkpoints.

pub mod center;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;

pub use center::{CenterMode, CenterState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use loss::{
    barlow_loss, byol_loss, combined_loss, cross_entropy, dino_loss, teacher_probs, BarlowStats, ViewLayout,
};
pub use model::{ArchConfig, BarlowPairing, LossConfig, Method, MethodLabel, StudentTeacher};
pub use train::{
    train_step, weakly_supervised_step, LogRecord, RunState, StepReport, TrainConfig, Trainer, UnitSampler,
    REPORT_EVERY,
};
