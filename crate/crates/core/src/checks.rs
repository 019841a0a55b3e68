//! Finite-difference checks of composed model pieces in f64.

use crate::audiofront::{mel_spectrogram, normalize_log_mel, synth_utterance, AudioEncoder, EncoderSpec, SynthSpec, Waveform};
use crate::distill::{combined_step_loss, teacher_target, Arm, BatchItem, LossConfig, StudentModel};
use crate::error::Result;
use crate::nnblocks::{build_stack, run_stack, LayerSpec, ParamStore};
use crate::numcore::{grad_check, GradCheckReport, Graph, Rng, Tensor};
use crate::qformer::{AsrModel, DecoderSpec, InitMode, QFormerSpec};
use crate::toylm::{LmSpec, ToyLm};

/// Central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

/// A causal two-layer stack with cross-attention, differentiated with
/// respect to its input rows.
pub fn attention_layer_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let spec = LayerSpec {
        width: 8,
        heads: 2,
        ffn_hidden: 16,
        causal: true,
        cross: true,
    };
    let layers = build_stack(&mut store, "stack", 2, spec, &mut rng)?;
    let x = rng.normal_tensor::<f64>(vec![4, 8], 1.0);
    let memory = rng.normal_tensor::<f64>(vec![3, 8], 1.0);
    let probe = rng.normal_tensor::<f64>(vec![4, 8], 1.0);
    grad_check(
        |g, v| {
            let p = store.bind(g, false);
            let m = g.constant(memory.clone());
            let y = run_stack(&layers, g, &p, v, Some(m))?;
            let w = g.constant(probe.clone());
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        },
        &x,
        GRAD_CHECK_EPS,
    )
}

/// The encoder's first stem convolution on features of a 0.1 s clip.
pub fn conv_stem_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let spec = EncoderSpec {
        n_mels: 16,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
    };
    let enc = AudioEncoder::new(&mut store, "enc", spec, &mut rng)?;
    let tokens: Vec<usize> = (4..12).collect();
    let synth = SynthSpec::for_tokens(&tokens, 16, 16_000, 40.0, 0.5, 0.01, (0.9, 1.1))?;
    let wave = synth_utterance(&[4, 5, 6], &synth, &mut rng)?;
    let clip = Waveform::new(wave.samples[..1600].to_vec(), 16_000)?;
    let feats = normalize_log_mel(&mel_spectrogram(&clip, 400, 160, 16)?).cast::<f64>();
    let probe = rng.normal_tensor::<f64>(vec![AudioEncoder::output_len(feats.rows()), 8], 1.0);
    let weights = store.get(enc.conv1).clone();
    grad_check(
        |g, k| {
            let p = store.bind(g, false).with(enc.conv1, k);
            let x = g.constant(feats.clone());
            let a = enc.forward(g, &p, x)?;
            let w = g.constant(probe.clone());
            let y = g.mul(a, w)?;
            Ok(g.sum(y))
        },
        &weights,
        GRAD_CHECK_EPS,
    )
}

/// The batch-mean training loss of `arm`, differentiated with respect to
/// the adapter's output projection.
pub fn combined_loss_check(seed: u64, arm: Arm) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut teacher_store = ParamStore::new();
    let lm_spec = LmSpec {
        vocab: 12,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        max_positions: 12,
    };
    let mut teacher = ToyLm::new(&mut teacher_store, "lm", lm_spec, &mut rng)?;
    teacher.frozen = true;
    let enc = EncoderSpec {
        n_mels: 4,
        width: 6,
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
    };
    let dec = DecoderSpec {
        vocab: 12,
        width: 6,
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
        max_positions: 8,
    };
    let donor = AsrModel::new(enc, dec, &mut rng)?;
    let spec = QFormerSpec {
        n_queries: 4,
        width: 6,
        lm_width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
    };
    let (student, store) = StudentModel::from_donor(&donor, spec, InitMode::Decoder, false, &mut rng)?;
    let features: Vec<Tensor<f32>> = (0..2).map(|i| rng.normal_tensor(vec![5 + i, 4], 1.0)).collect();
    let targets = [vec![4, 5], vec![7, 9, 10]]
        .iter()
        .map(|t| teacher_target(&teacher, &teacher_store, t))
        .collect::<Result<Vec<_>>>()?;
    let store = store.cast::<f64>();
    let teacher_store = teacher_store.cast::<f64>();
    let proj = student.adapter.projection.weight;
    let cfg = LossConfig {
        arm,
        ..LossConfig::default()
    };
    grad_check(
        |g: &mut Graph<f64>, v| {
            let sp = student.bind(g, &store).with(proj, v);
            let tp = teacher.bind(g, &teacher_store);
            let batch: Vec<BatchItem> = features
                .iter()
                .zip(&targets)
                .map(|(features, target)| BatchItem { features, target })
                .collect();
            Ok(combined_step_loss(g, &student, &sp, &teacher, &tp, &teacher_store, &batch, &cfg)?.0)
        },
        store.get(proj),
        GRAD_CHECK_EPS,
    )
}

/// Every composed check, in a fixed order.
pub fn composed_grad_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut out = vec![
        NamedCheck {
            name: "attention_layer",
            report: attention_layer_check(seed)?,
        },
        NamedCheck {
            name: "conv_stem",
            report: conv_stem_check(seed)?,
        },
    ];
    for (name, arm) in [
        ("combined_loss_full", Arm::Full),
        ("combined_loss_distill_only", Arm::DistillOnly),
        ("combined_loss_align_only", Arm::AlignOnly),
    ] {
        out.push(NamedCheck {
            name,
            report: combined_loss_check(seed, arm)?,
        });
    }
    Ok(out)
}
