use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nnblocks::{Binding, ParamStore};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::toylm::ToyLm;

use super::losses::{distill_loss, reference_kl, token_alignment_loss, AlignOptions};
use super::student::{StudentModel, TeacherTarget};

/// Which losses drive the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    DistillOnly,
    AlignOnly,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Full, Arm::DistillOnly, Arm::AlignOnly];
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Arm::Full),
            "distill_only" => Ok(Arm::DistillOnly),
            "align_only" => Ok(Arm::AlignOnly),
            other => Err(Error::Config(format!(
                "unknown arm {other:?} (full | distill_only | align_only)"
            ))),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Full => "full",
            Arm::DistillOnly => "distill_only",
            Arm::AlignOnly => "align_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub arm: Arm,
    pub lambda_con: f64,
    pub align: AlignOptions,
    pub distill_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            arm: Arm::Full,
            lambda_con: 1.0,
            align: AlignOptions::default(),
            distill_squared: false,
        }
    }
}

/// Batch-mean loss components of one step.
///
/// `combined` is the value that was differentiated: `l_distill +
/// lambda_con·l_con` for the full arm, `l_distill` for distill-only (where
/// `lambda_con` is recorded as 0) and `lambda_con·l_con` for align-only.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_distill: f64,
    pub combined: f64,
    pub reference_kl: f64,
    pub lambda_con: f64,
}

/// One student input and its cached teacher target.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub features: &'a Tensor<f32>,
    pub target: &'a TeacherTarget,
}

/// Builds the batch loss on `g` and returns it with its breakdown.
#[allow(clippy::too_many_arguments)]
pub fn combined_step_loss<T: Real>(
    g: &mut Graph<T>,
    student: &StudentModel,
    sp: &Binding,
    teacher: &ToyLm,
    tp: &Binding,
    teacher_store: &ParamStore<T>,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if !(cfg.lambda_con.is_finite() && cfg.lambda_con >= 0.0) {
        return Err(Error::Config(format!("lambda_con must be finite and >= 0, got {}", cfg.lambda_con)));
    }
    let o = teacher_store.get(teacher.output);
    let mut con: Option<Var> = None;
    let mut dis: Option<Var> = None;
    let mut kl_sum = 0.0;
    let accumulate = |g: &mut Graph<T>, acc: Option<Var>, x: Var| -> Result<Option<Var>> {
        Ok(Some(match acc {
            None => x,
            Some(a) => g.add(a, x)?,
        }))
    };
    for item in batch {
        let t_audio = student.audio_tokens(g, sp, item.features)?;
        let t_text = g.constant(item.target.t_text.cast::<T>());
        let l_con = token_alignment_loss(g, t_audio, t_text, cfg.align)?;
        let h_s = student.first_token_hidden(g, t_audio, teacher, tp)?;
        let h_t = g.constant(item.target.h_t.cast::<T>());
        let l_dis = distill_loss(g, h_s, h_t, cfg.distill_squared)?;
        kl_sum += reference_kl(g.value(h_t).data(), g.value(h_s).data(), o)?;
        con = accumulate(g, con, l_con)?;
        dis = accumulate(g, dis, l_dis)?;
    }
    let inv = T::from_f64(1.0 / batch.len() as f64);
    let con = g.scale(con.unwrap(), inv);
    let dis = g.scale(dis.unwrap(), inv);
    let lambda = T::from_f64(cfg.lambda_con);
    let (loss, lambda_recorded) = match cfg.arm {
        Arm::Full => {
            let weighted = g.scale(con, lambda);
            (g.add(dis, weighted)?, cfg.lambda_con)
        }
        Arm::DistillOnly => (dis, 0.0),
        Arm::AlignOnly => (g.scale(con, lambda), cfg.lambda_con),
    };
    let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown {
        l_con: scalar(g, con),
        l_distill: scalar(g, dis),
        combined: scalar(g, loss),
        reference_kl: kl_sum / batch.len() as f64,
        lambda_con: lambda_recorded,
    };
    Ok((loss, breakdown))
}
