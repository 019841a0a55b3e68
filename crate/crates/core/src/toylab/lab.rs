use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::{Rng, PROB_FLOOR};

pub const DEFAULT_DIMS: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];
pub const DEFAULT_LR_SWEEP: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

/// One dimension's worth of the toy experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyRunConfig {
    pub dim: usize,
    pub vocab: usize,
    pub steps: usize,
    pub runs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Arm A minimizes `‖h_s − h_t‖²` when set, `‖h_s − h_t‖` otherwise.
    pub l2_squared: bool,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        ToyRunConfig {
            dim: 64,
            vocab: 32_000,
            steps: 100,
            runs: 100,
            lr: 0.1,
            seed: 0,
            l2_squared: true,
        }
    }
}

/// The two objectives being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToyArm {
    L2,
    Kl,
}

impl fmt::Display for ToyArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyArm::L2 => "l2",
            ToyArm::Kl => "kl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyRun {
    pub run: usize,
    /// KL at the shared initialization, identical for both arms.
    pub initial_kl: f64,
    pub initial_kl_kl_arm: f64,
    pub final_kl_l2: f64,
    pub final_kl_kl: f64,
    /// The KL arm produced a non-finite value and was clamped.
    pub flagged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyResult {
    pub config: ToyRunConfig,
    pub runs: Vec<ToyRun>,
}

fn stats(xs: impl Iterator<Item = f64>) -> ArmStats {
    let v: Vec<f64> = xs.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    ArmStats { mean, std: var.sqrt() }
}

impl ToyResult {
    pub fn arm_stats(&self, arm: ToyArm) -> ArmStats {
        stats(self.runs.iter().map(|r| match arm {
            ToyArm::L2 => r.final_kl_l2,
            ToyArm::Kl => r.final_kl_kl,
        }))
    }

    /// Mean per-run `final_kl(KL arm) − final_kl(L2 arm)`.
    pub fn mean_gap(&self) -> f64 {
        stats(self.runs.iter().map(|r| r.final_kl_kl - r.final_kl_l2)).mean
    }

    pub fn flagged(&self) -> usize {
        self.runs.iter().filter(|r| r.flagged).count()
    }
}

const LANES: usize = 8;

/// Output matrix `O` (`V × d`, row-major f32) and the fixed teacher
/// distribution `p = σ(O h_t)`.
struct Problem {
    o: Vec<f32>,
    vocab: usize,
    dim: usize,
    log_p: Vec<f64>,
}

impl Problem {
    fn logits(&self, h: &[f64], out: &mut [f64]) {
        let hf: Vec<f32> = h.iter().map(|&x| x as f32).collect();
        let tail = self.dim - self.dim % LANES;
        for (z, row) in out.iter_mut().zip(self.o.chunks_exact(self.dim)) {
            let mut acc = [0f32; LANES];
            for (r, x) in row.chunks_exact(LANES).zip(hf.chunks_exact(LANES)) {
                let r: &[f32; LANES] = r.try_into().unwrap();
                let x: &[f32; LANES] = x.try_into().unwrap();
                for k in 0..LANES {
                    acc[k] += r[k] * x[k];
                }
            }
            let mut s: f32 = acc.iter().sum();
            for k in tail..self.dim {
                s += row[k] * hf[k];
            }
            *z = s as f64;
        }
    }

    /// `KL(p ‖ σ(O h))` with floored logs and `σ(O h)`; returns `None` when
    /// a non-finite value appears.
    fn kl(&self, h: &[f64], logits: &mut [f64], q: &mut [f64]) -> Option<f64> {
        self.logits(h, logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (qi, &l) in q.iter_mut().zip(logits.iter()) {
            *qi = (l - max).exp();
            z += *qi;
        }
        let log_z = z.ln();
        let floor = PROB_FLOOR.ln();
        let mut kl = 0.0;
        for i in 0..self.vocab {
            let log_q = (logits[i] - max - log_z).max(floor);
            q[i] /= z;
            let lp = self.log_p[i];
            if lp > floor {
                kl += lp.exp() * (lp - log_q);
            }
        }
        kl.is_finite().then_some(kl.max(0.0))
    }

    /// `Oᵀ (q − p)`, the KL gradient with respect to `h`.
    fn kl_grad(&self, q: &[f64], grad: &mut [f64]) {
        let mut acc = vec![0f32; self.dim];
        for v in 0..self.vocab {
            let c = (q[v] - self.log_p[v].exp()) as f32;
            // Flush subnormal coefficients to zero.
            if c.abs() < f32::MIN_POSITIVE {
                continue;
            }
            let row = &self.o[v * self.dim..(v + 1) * self.dim];
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += c * r;
            }
        }
        for (g, a) in grad.iter_mut().zip(acc) {
            *g = a as f64;
        }
    }
}

fn check(cfg: &ToyRunConfig) -> Result<()> {
    if cfg.dim == 0 || cfg.vocab < 2 {
        return Err(Error::Config(format!(
            "toy runs need dim >= 1 and vocab >= 2, got dim {} vocab {}",
            cfg.dim, cfg.vocab
        )));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("toy learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    Ok(())
}

/// Runs both arms from shared initializations `runs` times. `O`, `h_t` and
/// the initial `h_s` are standard normal; both arms use plain SGD. Runs are
/// independent and execute in parallel.
pub fn run_toy(cfg: &ToyRunConfig) -> Result<ToyResult> {
    check(cfg)?;
    let master = Rng::new(cfg.seed);
    let runs = (0..cfg.runs).into_par_iter().map(|run| one_run(cfg, &master, run)).collect();
    Ok(ToyResult { config: *cfg, runs })
}

fn one_run(cfg: &ToyRunConfig, master: &Rng, run: usize) -> ToyRun {
    let (v, d) = (cfg.vocab, cfg.dim);
    let mut logits = vec![0.0; v];
    let mut q = vec![0.0; v];
    let mut grad = vec![0.0; d];
    let mut rng = master.substream(((d as u64) << 32) | run as u64);
    let o: Vec<f32> = (0..v * d).map(|_| rng.normal() as f32).collect();
    let h_t: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let h_init: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut problem = Problem {
        o,
        vocab: v,
        dim: d,
        log_p: Vec::new(),
    };
    problem.logits(&h_t, &mut logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    problem.log_p = logits.iter().map(|l| l - max - log_z).collect();

    let mut flagged = false;
    let mut kl_or_flag = |problem: &Problem, h: &[f64], logits: &mut [f64], q: &mut [f64]| match problem.kl(h, logits, q) {
        Some(k) => k,
        None => {
            flagged = true;
            -PROB_FLOOR.ln()
        }
    };
    let initial_kl = kl_or_flag(&problem, &h_init, &mut logits, &mut q);

    let mut h = h_init.clone();
    for _ in 0..cfg.steps {
        let diff: Vec<f64> = h.iter().zip(&h_t).map(|(a, b)| a - b).collect();
        let scale = if cfg.l2_squared {
            2.0
        } else {
            let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        };
        for (hi, di) in h.iter_mut().zip(&diff) {
            *hi -= cfg.lr * scale * di;
        }
    }
    let final_kl_l2 = kl_or_flag(&problem, &h, &mut logits, &mut q);

    let mut h = h_init;
    let initial_kl_kl_arm = kl_or_flag(&problem, &h, &mut logits, &mut q);
    let mut final_kl_kl = initial_kl_kl_arm;
    for _ in 0..cfg.steps {
        problem.kl_grad(&q, &mut grad);
        for (hi, gi) in h.iter_mut().zip(&grad) {
            *hi -= cfg.lr * gi;
        }
        final_kl_kl = kl_or_flag(&problem, &h, &mut logits, &mut q);
    }
    ToyRun {
        run,
        initial_kl,
        initial_kl_kl_arm,
        final_kl_l2,
        final_kl_kl,
        flagged,
    }
}

/// One sweep cell: a dimension at one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub lr: f64,
    pub result: ToyResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Whether the sweep covered several learning rates.
    pub lr_sweep: bool,
}

/// Runs [`run_toy`] for every dimension (ascending) and learning rate;
/// with a single rate `base.lr` is used.
pub fn sweep(dims: &[usize], base: &ToyRunConfig, lrs: Option<&[f64]>) -> Result<SweepResult> {
    if dims.is_empty() {
        return Err(Error::Config("the sweep needs at least one dimension".into()));
    }
    if dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sweep dimensions must be strictly ascending: {dims:?}")));
    }
    let rates: Vec<f64> = match lrs {
        Some(r) if r.is_empty() => return Err(Error::Config("empty learning-rate sweep".into())),
        Some(r) => r.to_vec(),
        None => vec![base.lr],
    };
    let mut cells = Vec::new();
    for &dim in dims {
        for &lr in &rates {
            let cfg = ToyRunConfig { dim, lr, ..*base };
            cells.push(SweepCell {
                lr,
                result: run_toy(&cfg)?,
            });
        }
    }
    Ok(SweepResult {
        cells,
        lr_sweep: lrs.is_some(),
    })
}

/// Per-dimension summary; in lr-sweep mode each arm is reported at the
/// rate giving its lowest mean final KL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimSummary {
    pub dim: usize,
    pub l2: ArmStats,
    pub l2_lr: f64,
    pub kl: ArmStats,
    pub kl_lr: f64,
    /// Mean per-run gap (KL arm − L2 arm) at the single rate, or between the
    /// two best rates in lr-sweep mode.
    pub mean_gap: f64,
    pub flagged: usize,
}

impl SweepResult {
    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.cells.iter().map(|c| c.result.config.dim).collect();
        d.dedup();
        d
    }

    pub fn summary(&self) -> Vec<DimSummary> {
        self.dims()
            .into_iter()
            .map(|dim| {
                let cells: Vec<&SweepCell> = self.cells.iter().filter(|c| c.result.config.dim == dim).collect();
                let best = |arm: ToyArm| {
                    cells
                        .iter()
                        .min_by(|a, b| a.result.arm_stats(arm).mean.total_cmp(&b.result.arm_stats(arm).mean))
                        .unwrap()
                };
                let (bl2, bkl) = (best(ToyArm::L2), best(ToyArm::Kl));
                let gap = stats(
                    bl2.result
                        .runs
                        .iter()
                        .zip(&bkl.result.runs)
                        .map(|(a, b)| b.final_kl_kl - a.final_kl_l2),
                )
                .mean;
                DimSummary {
                    dim,
                    l2: bl2.result.arm_stats(ToyArm::L2),
                    l2_lr: bl2.lr,
                    kl: bkl.result.arm_stats(ToyArm::Kl),
                    kl_lr: bkl.lr,
                    mean_gap: gap,
                    flagged: cells.iter().map(|c| c.result.flagged()).sum(),
                }
            })
            .collect()
    }

    /// `dim,arm,run,final_kl`, plus a trailing `lr` column in lr-sweep mode.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        if self.lr_sweep {
            writeln!(out, "dim,arm,run,final_kl,lr")?;
        } else {
            writeln!(out, "dim,arm,run,final_kl")?;
        }
        for cell in &self.cells {
            let dim = cell.result.config.dim;
            for arm in [ToyArm::L2, ToyArm::Kl] {
                for r in &cell.result.runs {
                    let kl = match arm {
                        ToyArm::L2 => r.final_kl_l2,
                        ToyArm::Kl => r.final_kl_kl,
                    };
                    if self.lr_sweep {
                        writeln!(out, "{dim},{arm},{},{kl},{}", r.run, cell.lr)?;
                    } else {
                        writeln!(out, "{dim},{arm},{},{kl}", r.run)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Usage(format!(
            "spearman needs two equal-length samples of size >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}
