//! Token alignment and hidden-state distillation objectives, the monitoring
//! KL, and the student pipeline they are applied to.

mod combined;
mod losses;
mod student;

pub use combined::{combined_step_loss, Arm, BatchItem, LossBreakdown, LossConfig};
pub use losses::{distill_loss, reference_kl, token_alignment_loss, token_alignment_value, AlignOptions};
pub use student::{teacher_target, StudentModel, TeacherTarget, STUDENT_ENCODER, STUDENT_QFORMER};

#[cfg(test)]
mod tests;
