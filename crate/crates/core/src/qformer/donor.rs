use log::info;

use crate::audiofront::{AudioEncoder, EncoderSpec};
use crate::error::{dim_err, Error, Result};
use crate::nnblocks::{build_stack, EMBED_INIT_STD, run_stack, Binding, LayerSpec, Linear, Norm, ParamId, ParamStore, TransformerLayer};
use crate::numcore::{Graph, Real, Rng, Var};
use crate::toylm::{argmax, BOS, EOS};
use crate::trainer::{clip_global_norm, collect_grads, AdamWConfig, AdamWState, AudioExample, Schedule};

/// Shape of the donor ASR decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderSpec {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_positions: usize,
}

/// Decoder half of the toy encoder-decoder ASR model.
#[derive(Clone, Debug, PartialEq)]
pub struct DonorDecoder {
    pub spec: DecoderSpec,
    /// Parameter-name prefix of this decoder in its store.
    pub prefix: String,
    pub embed: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Norm,
    pub head: Linear,
}

impl DonorDecoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: DecoderSpec, rng: &mut Rng) -> Result<Self> {
        let h = spec.width;
        let embed = store.add_normal(format!("{prefix}.embed"), vec![spec.vocab, h], EMBED_INIT_STD, rng)?;
        let positions = store.add_normal(format!("{prefix}.positions"), vec![spec.max_positions, h], EMBED_INIT_STD, rng)?;
        let layer_spec = LayerSpec {
            width: h,
            heads: spec.heads,
            ffn_hidden: spec.ffn_hidden,
            causal: true,
            cross: true,
        };
        let layers = build_stack(store, &format!("{prefix}.layers"), spec.layers, layer_spec, rng)?;
        let final_norm = Norm::new(store, &format!("{prefix}.final_norm"), h)?;
        let head = Linear::new(store, &format!("{prefix}.head"), h, spec.vocab, true, rng)?;
        Ok(DonorDecoder {
            spec,
            prefix: prefix.to_string(),
            embed,
            positions,
            layers,
            final_norm,
            head,
        })
    }

    /// Next-token logits for every input position, `L × V`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, tokens: &[usize], memory: Var) -> Result<Var> {
        if tokens.len() > self.spec.max_positions {
            return Err(dim_err!(
                "{} decoder inputs exceed {} positions",
                tokens.len(),
                self.spec.max_positions
            ));
        }
        let e = g.gather_rows(p[self.embed], tokens)?;
        let pos = g.slice_rows(p[self.positions], 0, tokens.len())?;
        let x = g.add(e, pos)?;
        let x = run_stack(&self.layers, g, p, x, Some(memory))?;
        let x = self.final_norm.forward(g, p, x)?;
        self.head.forward(g, p, x)
    }
}

/// Encoder and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub encoder: AudioEncoder,
    pub decoder: DonorDecoder,
    pub store: ParamStore<f32>,
}

impl AsrModel {
    pub fn new(enc: EncoderSpec, dec: DecoderSpec, rng: &mut Rng) -> Result<Self> {
        if enc.width != dec.width {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {}",
                enc.width, dec.width
            )));
        }
        let mut store = ParamStore::new();
        let encoder = AudioEncoder::new(&mut store, "asr.encoder", enc, rng)?;
        let decoder = DonorDecoder::new(&mut store, "asr.decoder", dec, rng)?;
        Ok(AsrModel { encoder, decoder, store })
    }

    /// Teacher-forced logits for `BOS x…` and the targets `x… EOS`.
    fn logits(&self, g: &mut Graph<f32>, p: &Binding, ex: &AudioExample) -> Result<(Var, Vec<usize>)> {
        let mel = g.constant(ex.features.clone());
        let memory = self.encoder.forward(g, p, mel)?;
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&ex.transcript);
        let mut targets = ex.transcript.clone();
        targets.push(EOS);
        let logits = self.decoder.forward(g, p, &inputs, memory)?;
        Ok((logits, targets))
    }

    fn check(&self, ex: &AudioExample) -> Result<()> {
        let v = self.decoder.spec.vocab;
        if let Some(t) = ex.transcript.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("example {}: token {t} outside vocabulary {v}", ex.id)));
        }
        if ex.transcript.len() + 1 > self.decoder.spec.max_positions {
            return Err(Error::Data(format!(
                "example {}: transcript of {} tokens exceeds the decoder's {} positions",
                ex.id,
                ex.transcript.len(),
                self.decoder.spec.max_positions
            )));
        }
        Ok(())
    }

    /// Teacher-forced token accuracy over transcript tokens and the closing
    /// `EOS`.
    pub fn token_accuracy(&self, examples: &[AudioExample]) -> Result<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for ex in examples {
            self.check(ex)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let (logits, targets) = self.logits(&mut g, &p, ex)?;
            let lv = g.value(logits);
            for (i, &t) in targets.iter().enumerate() {
                hit += usize::from(argmax(lv.row(i)) == t);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("no examples to score".into()));
        }
        Ok(hit as f64 / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DonorConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Training stops once held-out token accuracy reaches this.
    pub target_accuracy: f64,
    /// Below this at `max_steps` the run is reported as failed.
    pub min_accuracy: f64,
    pub eval_every: usize,
}

impl Default for DonorConfig {
    fn default() -> Self {
        DonorConfig {
            max_steps: 1500,
            batch_size: 16,
            base_lr: 2e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            target_accuracy: 0.95,
            min_accuracy: 0.6,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DonorReport {
    pub held_out_accuracy: f64,
    pub steps_run: usize,
    pub losses: Vec<f64>,
}

/// Trains encoder and decoder on (audio, transcript) pairs with next-token
/// cross-entropy until the held-out token accuracy reaches the target or
/// the step budget runs out.
pub fn pretrain_donor(
    train: &[AudioExample],
    held_out: &[AudioExample],
    enc: EncoderSpec,
    dec: DecoderSpec,
    cfg: &DonorConfig,
) -> Result<(AsrModel, DonorReport)> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::Data("donor pretraining needs nonempty train and held-out sets".into()));
    }
    if cfg.max_steps == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("donor steps, batch size and eval interval must be >= 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut model = AsrModel::new(enc, dec, &mut root.substream(0))?;
    for ex in train.iter().chain(held_out) {
        model.check(ex)?;
    }
    let mut order_rng = root.substream(1);
    let schedule = Schedule {
        base_lr: cfg.base_lr,
        total_steps: cfg.max_steps,
        warmup_fraction: cfg.warmup_fraction,
    };
    let mut opt = AdamWState::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::new();
    let mut accuracy = 0.0;
    let mut steps_run = 0;
    for step in 0..cfg.max_steps {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let mut total: Option<Var> = None;
        let mut tokens = 0usize;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order_rng.shuffle(&mut order);
            }
            let ex = &train[order.pop().unwrap()];
            let (logits, targets) = model.logits(&mut g, &p, ex)?;
            let lp = g.log_softmax_rows(logits)?;
            let entries: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
            let picked = g.pick(lp, &entries)?;
            let s = g.sum(picked);
            tokens += targets.len();
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        let loss = g.scale(total.unwrap(), -1.0 / tokens as f32);
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("donor pretraining diverged at step {step}: loss {value}")));
        }
        losses.push(value);
        g.backward(loss)?;
        let mut grads = collect_grads(&g, &p, &model.store);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.update(&mut model.store, &grads, schedule.lr_at(step)?)?;
        steps_run = step + 1;
        if steps_run % cfg.eval_every == 0 || steps_run == cfg.max_steps {
            accuracy = model.token_accuracy(held_out)?;
            info!("donor step {steps_run} loss {value:.4} held-out accuracy {accuracy:.3}");
            if accuracy >= cfg.target_accuracy {
                break;
            }
        }
    }
    if accuracy < cfg.min_accuracy {
        return Err(Error::Training(format!(
            "donor reached only {accuracy:.3} held-out token accuracy after {steps_run} steps (floor {})",
            cfg.min_accuracy
        )));
    }
    Ok((
        model,
        DonorReport {
            held_out_accuracy: accuracy,
            steps_run,
            losses,
        },
    ))
}
