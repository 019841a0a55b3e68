//! Optimization, checkpoints, example synthesis and the distillation
//! training loop.

mod checkpoint;
mod data;
mod optim;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint, MAGIC, VERSION};
pub use data::{synthesize_examples, AudioExample, ExampleSpec};
pub use optim::{clip_global_norm, collect_grads, AdamWConfig, AdamWState, Schedule};
pub use train::{build_student, teacher_targets, train, write_metrics_csv, MetricsRow, TrainConfig, METRICS_HEADER};
