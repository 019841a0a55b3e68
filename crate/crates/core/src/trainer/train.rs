use std::io::Write;

use log::info;

use crate::distill::{combined_step_loss, teacher_target, AlignOptions, Arm, BatchItem, LossBreakdown, LossConfig, StudentModel, TeacherTarget};
use crate::error::{Error, Result};
use crate::nnblocks::ParamStore;
use crate::numcore::{Graph, Rng};
use crate::qformer::{AsrModel, InitMode, QFormerSpec};
use crate::toylm::ToyLm;

use super::data::AudioExample;
use super::optim::{clip_global_norm, collect_grads, AdamWConfig, AdamWState, Schedule};

/// Header of the per-step metrics CSV.
pub const METRICS_HEADER: &str = "step,lr,l_con,l_distill,combined,reference_kl";

/// Distillation run settings. The defaults are sized for a single CPU core.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub arm: Arm,
    pub init_mode: InitMode,
    pub freeze_encoder: bool,
    pub lambda_con: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub align: AlignOptions,
    pub distill_squared: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 600,
            batch_size: 16,
            base_lr: 1e-3,
            weight_decay: 0.1,
            warmup_fraction: 0.01,
            seed: 0,
            arm: Arm::Full,
            init_mode: InitMode::Decoder,
            freeze_encoder: false,
            lambda_con: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            align: AlignOptions::default(),
            distill_squared: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be >= 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.lambda_con >= 0.0) {
            return Err(Error::Config("base_lr, weight_decay and lambda_con must be >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            total_steps: self.total_steps,
            warmup_fraction: self.warmup_fraction,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            arm: self.arm,
            lambda_con: self.lambda_con,
            align: self.align,
            distill_squared: self.distill_squared,
        }
    }
}

/// One row of the metrics series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Builds the student for `cfg` from the donor; initialization randomness
/// comes from the run seed.
pub fn build_student(donor: &AsrModel, spec: QFormerSpec, cfg: &TrainConfig) -> Result<(StudentModel, ParamStore<f32>)> {
    let mut rng = Rng::new(cfg.seed).substream(0);
    StudentModel::from_donor(donor, spec, cfg.init_mode, cfg.freeze_encoder, &mut rng)
}

/// Teacher targets for every example, in order.
pub fn teacher_targets(teacher: &ToyLm, store: &ParamStore<f32>, data: &[AudioExample]) -> Result<Vec<TeacherTarget>> {
    data.iter().map(|ex| teacher_target(teacher, store, &ex.transcript)).collect()
}

/// Trains the student in place and returns the per-step metrics. The
/// teacher must be frozen and its checksum is verified unchanged at the end.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    student: &StudentModel,
    store: &mut ParamStore<f32>,
    teacher: &ToyLm,
    teacher_store: &ParamStore<f32>,
    data: &[AudioExample],
    targets: &[TeacherTarget],
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if data.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} examples but {} teacher targets",
            data.len(),
            targets.len()
        )));
    }
    if !teacher.frozen {
        return Err(Error::Config("the teacher must be frozen before distillation".into()));
    }
    let checksum = teacher_store.checksum();
    let schedule = cfg.schedule();
    let loss_cfg = cfg.loss();
    let mut opt = AdamWState::new(
        store,
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
    );
    let mut order_rng = Rng::new(cfg.seed).substream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).rev().collect();
                order_rng.shuffle(&mut order);
            }
            let i = order.pop().unwrap();
            batch.push(BatchItem {
                features: &data[i].features,
                target: &targets[i],
            });
        }
        let mut g = Graph::new();
        let sp = student.bind(&mut g, store);
        let tp = teacher.bind(&mut g, teacher_store);
        let (loss, breakdown) = combined_step_loss(&mut g, student, &sp, teacher, &tp, teacher_store, &batch, &loss_cfg)?;
        if !breakdown.combined.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at step {step}",
                breakdown.combined
            )));
        }
        let lr = schedule.lr_at(step)?;
        g.backward(loss)?;
        let mut grads = collect_grads(&g, &sp, store);
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        opt.update(store, &grads, lr)?;
        if step % 50 == 0 {
            info!(
                "{} step {step} combined {:.4} l_con {:.4} l_distill {:.4} kl {:.4}",
                cfg.arm, breakdown.combined, breakdown.l_con, breakdown.l_distill, breakdown.reference_kl
            );
        }
        metrics.push(MetricsRow {
            step,
            lr,
            loss: breakdown,
        });
    }
    if teacher_store.checksum() != checksum {
        return Err(Error::Training("teacher parameters changed during training".into()));
    }
    Ok(metrics)
}

/// Writes the metrics series as CSV with [`METRICS_HEADER`].
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.loss.l_con, r.loss.l_distill, r.loss.combined, r.loss.reference_kl
        )?;
    }
    Ok(())
}
