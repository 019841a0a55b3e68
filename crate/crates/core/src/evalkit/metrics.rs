use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::Rng;

fn check_lengths(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    Ok(())
}

/// Fraction of positions where `preds` and `golds` agree.
pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-class F1 averaged with weights proportional to gold support; a
/// class's F1 is 0 when precision or recall is undefined.
pub fn weighted_f1(preds: &[usize], golds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, golds)?;
    if let Some(bad) = preds.iter().chain(golds).find(|x| !labels.contains(x)) {
        return Err(Error::Data(format!("label {bad} is not in the label set {labels:?}")));
    }
    let mut tp: BTreeMap<usize, f64> = BTreeMap::new();
    let mut predicted: BTreeMap<usize, f64> = BTreeMap::new();
    let mut support: BTreeMap<usize, f64> = BTreeMap::new();
    for (&p, &g) in preds.iter().zip(golds) {
        *predicted.entry(p).or_default() += 1.0;
        *support.entry(g).or_default() += 1.0;
        if p == g {
            *tp.entry(g).or_default() += 1.0;
        }
    }
    let n = golds.len() as f64;
    let mut total = 0.0;
    for (&class, &s) in &support {
        let t = tp.get(&class).copied().unwrap_or(0.0);
        let pc = predicted.get(&class).copied().unwrap_or(0.0);
        let f1 = if t == 0.0 { 0.0 } else { 2.0 * t / (pc + s) };
        total += f1 * s / n;
    }
    Ok(total)
}

/// Result of a paired bootstrap comparison of two systems.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapReport {
    /// `mean(a) − mean(b)` on the original sample.
    pub observed_diff: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub seed: u64,
}

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Paired bootstrap over per-example scores. Each resample draws `n`
/// indices with replacement; the two-sided p-value is
/// `2·min(P(d ≤ 0), P(d ≥ 0))` clamped to 1, and the interval is the
/// 2.5/97.5 percentile range of the resampled differences. Pairs are put
/// in a canonical order first, so the report does not depend on how the
/// examples were ordered.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapReport> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Usage("paired bootstrap needs at least 2 pairs".into()));
    }
    if resamples < 100 {
        return Err(Error::Usage(format!("paired bootstrap needs >= 100 resamples, got {resamples}")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("bootstrap scores must be finite".into()));
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    diffs.sort_by(f64::total_cmp);
    let n = diffs.len();
    let observed_diff = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = Rng::new(seed);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.below(n)];
        }
        stats.push(s / n as f64);
    }
    let le = stats.iter().filter(|&&d| d <= 0.0).count() as f64 / resamples as f64;
    let ge = stats.iter().filter(|&&d| d >= 0.0).count() as f64 / resamples as f64;
    let p_value = (2.0 * le.min(ge)).min(1.0);
    stats.sort_by(f64::total_cmp);
    Ok(BootstrapReport {
        observed_diff,
        p_value,
        ci_low: percentile(&stats, 2.5),
        ci_high: percentile(&stats, 97.5),
        resamples,
        seed,
    })
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
