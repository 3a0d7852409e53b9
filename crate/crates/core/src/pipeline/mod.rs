//! Three-stage training, tiled inference, checkpoints and run logs.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod log;
pub mod train;

pub use checkpoint::{
    param_hash, Architecture, CheckpointHeader, CodebookShape, ModelCheckpoint, ModelKind,
};
pub use config::{CodebookConfig, DistillOn, Quantizer, RunConfig, Stage, StageConfig};
pub use infer::{
    binarize, generate_pseudo_labels, infer_tiled, infer_volume, Predictor, PseudoLabelSet,
};
pub use log::{append_log, parse_log, read_log, EpochRecord, METRICS_FILE};
pub use train::{
    derive_seed, finetune_teacher, pretrain_teacher, student_architecture, student_checkpoint,
    student_from_checkpoint, train_student, Progress, StageOptions, StudentRun, TeacherState,
};
