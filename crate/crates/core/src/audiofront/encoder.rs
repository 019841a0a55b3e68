use crate::error::{dim_err, Result};
use crate::nnblocks::{build_stack, run_stack, sinusoidal_positions, Binding, LayerSpec, Norm, ParamId, ParamStore, TransformerLayer};
use crate::numcore::{Graph, Real, Rng, Tensor, Var};

use super::mel::{mel_spectrogram, normalize_log_mel};
use super::Waveform;

/// Geometry of the audio encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub n_mels: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

/// Two-convolution stem followed by a bidirectional transformer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoder {
    pub spec: EncoderSpec,
    pub conv1: ParamId,
    pub conv1_bias: ParamId,
    pub conv2: ParamId,
    pub conv2_bias: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Norm,
}

impl AudioEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        let h = spec.width;
        let std1 = 1.0 / ((3 * spec.n_mels) as f64).sqrt();
        let std2 = 1.0 / ((3 * h) as f64).sqrt();
        let conv1 = store.add_normal(format!("{prefix}.conv1.weight"), vec![3, spec.n_mels, h], std1, rng)?;
        let conv1_bias = store.add_full(format!("{prefix}.conv1.bias"), vec![h], 0.0)?;
        let conv2 = store.add_normal(format!("{prefix}.conv2.weight"), vec![3, h, h], std2, rng)?;
        let conv2_bias = store.add_full(format!("{prefix}.conv2.bias"), vec![h], 0.0)?;
        let layer_spec = LayerSpec {
            width: h,
            heads: spec.heads,
            ffn_hidden: spec.ffn_hidden,
            causal: false,
            cross: false,
        };
        let layers = build_stack(store, &format!("{prefix}.layers"), spec.layers, layer_spec, rng)?;
        let final_norm = Norm::new(store, &format!("{prefix}.final_norm"), h)?;
        Ok(AudioEncoder {
            spec,
            conv1,
            conv1_bias,
            conv2,
            conv2_bias,
            layers,
            final_norm,
        })
    }

    /// Number of encoder frames for `frames` mel frames: `ceil(frames / 2)`.
    pub fn output_len(frames: usize) -> usize {
        frames.div_ceil(2)
    }

    /// conv(K=3, s=1, p=1)+GELU, conv(K=3, s=2, p=1)+GELU, plus sinusoidal
    /// positions.
    pub fn conv_stem<T: Real>(&self, g: &mut Graph<T>, p: &Binding, mel: Var) -> Result<Var> {
        let bins = g.value(mel).cols();
        if bins != self.spec.n_mels {
            return Err(dim_err!(
                "mel input has {} bins, encoder expects {}",
                bins,
                self.spec.n_mels
            ));
        }
        let x = g.conv1d(mel, p[self.conv1], 1, 1)?;
        let x = g.add_row(x, p[self.conv1_bias])?;
        let x = g.gelu(x);
        let x = g.conv1d(x, p[self.conv2], 2, 1)?;
        let x = g.add_row(x, p[self.conv2_bias])?;
        let x = g.gelu(x);
        let frames = g.value(x).rows();
        let pos = g.constant(sinusoidal_positions(frames, self.spec.width)?);
        g.add(x, pos)
    }

    /// Audio embeddings `A`, `ceil(T/2) × width`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, mel: Var) -> Result<Var> {
        let x = self.conv_stem(g, p, mel)?;
        let x = run_stack(&self.layers, g, p, x, None)?;
        self.final_norm.forward(g, p, x)
    }
}

/// Log-mel, normalization and encoder forward for one waveform, outside of
/// any training graph.
pub fn encode_audio<T: Real>(
    w: &Waveform,
    encoder: &AudioEncoder,
    store: &ParamStore<T>,
    n_fft: usize,
    hop: usize,
) -> Result<Tensor<T>> {
    let mel = mel_spectrogram(w, n_fft, hop, encoder.spec.n_mels)?;
    let feats = normalize_log_mel(&mel).cast::<T>();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(feats);
    let out = encoder.forward(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}
