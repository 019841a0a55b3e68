use log::info;

use crate::error::{Error, Result};
use crate::nnblocks::ParamStore;
use crate::numcore::{log_softmax, Graph, Rng};
use crate::trainer::{clip_global_norm, collect_grads, AdamWConfig, AdamWState, Schedule};

use super::corpus::{SyntheticCorpus, ASSISTANT};
use super::model::{argmax, LmSpec, ToyLm};

/// Held-out perplexity must be at most this fraction of the unigram baseline.
pub const PERPLEXITY_MARGIN: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 800,
            batch_size: 16,
            base_lr: 3e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmReport {
    pub held_out_perplexity: f64,
    pub unigram_perplexity: f64,
    /// Fraction of held-out dialogues whose first reply token is the argmax
    /// right after the assistant marker.
    pub reply_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Mean next-token negative log-likelihood of one sequence, as a graph node.
fn sequence_nll(lm: &ToyLm, g: &mut Graph<f32>, p: &crate::nnblocks::Binding, seq: &[usize]) -> Result<crate::numcore::Var> {
    let n = seq.len() - 1;
    let h = lm.forward_tokens(g, p, &seq[..n])?;
    let logits = lm.logits(g, p, h)?;
    let lp = g.log_softmax_rows(logits)?;
    let entries: Vec<(usize, usize)> = (0..n).map(|i| (i, seq[i + 1])).collect();
    let picked = g.pick(lp, &entries)?;
    Ok(g.sum(picked))
}

/// Perplexity over the predicted positions (all but the first) of `seqs`.
pub fn perplexity(lm: &ToyLm, store: &ParamStore<f32>, seqs: &[Vec<usize>]) -> Result<f64> {
    let (mut nll, mut n) = (0.0f64, 0usize);
    for seq in seqs.iter().filter(|s| s.len() > 1) {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let h = lm.forward_tokens(&mut g, &p, &seq[..seq.len() - 1])?;
        let logits = lm.logits(&mut g, &p, h)?;
        let lv = g.value(logits);
        for i in 0..seq.len() - 1 {
            nll -= log_softmax(lv.row(i))[seq[i + 1]];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no predicted positions to evaluate".into()));
    }
    Ok((nll / n as f64).exp())
}

fn reply_accuracy(lm: &ToyLm, store: &ParamStore<f32>, seqs: &[Vec<usize>]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for seq in seqs {
        let Some(pos) = seq.iter().position(|&t| t == ASSISTANT) else {
            continue;
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let h = lm.forward_tokens(&mut g, &p, &seq[..=pos])?;
        let last = g.value(h).row(pos).to_vec();
        let logits = lm.next_token_logits(store, &last)?;
        hit += usize::from(argmax(&logits) == seq[pos + 1]);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Trains the teacher with next-token cross-entropy, checks it beats the
/// unigram baseline by the required margin, and returns it frozen.
pub fn pretrain_lm(corpus: &SyntheticCorpus, spec: LmSpec, cfg: &LmTrainConfig) -> Result<(ToyLm, ParamStore<f32>, LmReport)> {
    if corpus.train.is_empty() || corpus.held_out.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("LM pretraining needs steps >= 1 and batch_size >= 1".into()));
    }
    if let Some(s) = corpus.train.iter().find(|s| s.len() > spec.max_positions + 1) {
        return Err(Error::Config(format!(
            "sequence of {} tokens exceeds {} positions",
            s.len(),
            spec.max_positions
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.substream(0);
    let mut order_rng = root.substream(1);
    let mut store = ParamStore::new();
    let mut lm = ToyLm::new(&mut store, "lm", spec, &mut init_rng)?;
    let schedule = Schedule {
        base_lr: cfg.base_lr,
        total_steps: cfg.steps,
        warmup_fraction: cfg.warmup_fraction,
    };
    let mut opt = AdamWState::new(
        &store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let mut total = None;
        let mut tokens = 0usize;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.train.len()).collect();
                order_rng.shuffle(&mut order);
            }
            let seq = &corpus.train[order.pop().unwrap()];
            if seq.len() < 2 {
                continue;
            }
            tokens += seq.len() - 1;
            let s = sequence_nll(&lm, &mut g, &p, seq)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        let Some(total) = total else { continue };
        let loss = g.scale(total, -1.0 / tokens as f32);
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("LM pretraining diverged at step {step}: loss {value}")));
        }
        losses.push(value);
        g.backward(loss)?;
        let mut grads = collect_grads(&g, &p, &store);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.update(&mut store, &grads, schedule.lr_at(step)?)?;
        if step % 100 == 0 {
            info!("lm step {step} loss {value:.4}");
        }
    }
    let held_out_perplexity = perplexity(&lm, &store, &corpus.held_out)?;
    let unigram_perplexity = corpus.unigram_perplexity();
    let report = LmReport {
        held_out_perplexity,
        unigram_perplexity,
        reply_accuracy: reply_accuracy(&lm, &store, &corpus.held_out)?,
        losses,
    };
    if !held_out_perplexity.is_finite() || held_out_perplexity > PERPLEXITY_MARGIN * unigram_perplexity {
        return Err(Error::Training(format!(
            "held-out perplexity {held_out_perplexity:.3} does not beat {PERPLEXITY_MARGIN} x unigram {unigram_perplexity:.3}"
        )));
    }
    lm.frozen = true;
    Ok((lm, store, report))
}
