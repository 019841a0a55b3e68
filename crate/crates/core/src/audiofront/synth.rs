use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::Rng;

use super::mel::{mel_centers, mel_spectrogram};
use super::Waveform;

/// Maps each token to a two-tone chord.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub tone_ms: f64,
    pub tone_amplitude: f64,
    pub noise_amplitude: f64,
    pub pitch_range: (f64, f64),
    freqs: BTreeMap<usize, (f64, f64)>,
}

impl SynthSpec {
    /// Assigns chords built from pairs of mel filter centers `(i, j)` with
    /// `j ≥ i + 2`, in lexicographic order, to `tokens`.
    pub fn for_tokens(
        tokens: &[usize],
        n_mels: usize,
        sample_rate: u32,
        tone_ms: f64,
        tone_amplitude: f64,
        noise_amplitude: f64,
        pitch_range: (f64, f64),
    ) -> Result<Self> {
        let centers = mel_centers(n_mels, sample_rate);
        let pairs: Vec<(f64, f64)> = (0..n_mels)
            .flat_map(|i| (i + 2..n_mels).map(move |j| (i, j)))
            .map(|(i, j)| (centers[i], centers[j]))
            .collect();
        if pairs.len() < tokens.len() {
            return Err(Error::Config(format!(
                "{} mel bands give {} distinct chords, {} tokens need one each",
                n_mels,
                pairs.len(),
                tokens.len()
            )));
        }
        if !(pitch_range.0 > 0.0 && pitch_range.0 <= pitch_range.1) {
            return Err(Error::Config(format!("bad pitch range {pitch_range:?}")));
        }
        if tone_ms <= 0.0 {
            return Err(Error::Config("tone duration must be positive".into()));
        }
        let freqs = tokens.iter().copied().zip(pairs).collect();
        Ok(SynthSpec {
            sample_rate,
            tone_ms,
            tone_amplitude,
            noise_amplitude,
            pitch_range,
            freqs,
        })
    }

    pub fn chord(&self, token: usize) -> Option<(f64, f64)> {
        self.freqs.get(&token).copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.freqs.keys().copied()
    }

    pub fn tone_samples(&self) -> usize {
        (self.sample_rate as f64 * self.tone_ms / 1000.0).round() as usize
    }

    /// Smallest, over token pairs, of the largest per-bin gap between their
    /// noise-free log-mel frames. Learnability needs this above 1.0.
    pub fn min_pairwise_separation(&self, n_fft: usize, hop: usize, n_mels: usize) -> Result<f64> {
        let mut feats = Vec::new();
        for tok in self.tokens() {
            let w = self.render(&[tok], 1.0, None)?;
            let mel = mel_spectrogram(&w, n_fft, hop, n_mels)?;
            let mid = mel.frames() / 2;
            feats.push(mel.values.row(mid).to_vec());
        }
        let mut worst = f64::INFINITY;
        for a in 0..feats.len() {
            for b in a + 1..feats.len() {
                let gap = feats[a]
                    .iter()
                    .zip(&feats[b])
                    .map(|(x, y)| (x - y).abs() as f64)
                    .fold(0.0, f64::max);
                worst = worst.min(gap);
            }
        }
        Ok(worst)
    }

    fn render(&self, tokens: &[usize], shift: f64, mut noise: Option<&mut Rng>) -> Result<Waveform> {
        let per = self.tone_samples();
        let sr = self.sample_rate as f64;
        let mut samples = Vec::with_capacity(per * tokens.len());
        for &tok in tokens {
            let (f1, f2) = self
                .chord(tok)
                .ok_or_else(|| Error::Data(format!("token {tok} has no chord in the synth spec")))?;
            let (w1, w2) = (
                2.0 * std::f64::consts::PI * f1 * shift / sr,
                2.0 * std::f64::consts::PI * f2 * shift / sr,
            );
            for n in 0..per {
                let t = n as f64;
                let mut s = self.tone_amplitude * ((w1 * t).sin() + (w2 * t).sin());
                if let Some(rng) = noise.as_deref_mut() {
                    s += self.noise_amplitude * rng.uniform_range(-1.0, 1.0);
                }
                samples.push(s.clamp(-1.0, 1.0) as f32);
            }
        }
        Ok(Waveform {
            samples,
            sample_rate: self.sample_rate,
        })
    }
}

/// Concatenated per-token chords with one pitch-shift factor per utterance
/// and additive uniform white noise.
pub fn synth_utterance(tokens: &[usize], spec: &SynthSpec, rng: &mut Rng) -> Result<Waveform> {
    let shift = rng.uniform_range(spec.pitch_range.0, spec.pitch_range.1);
    let noisy = spec.noise_amplitude > 0.0;
    spec.render(tokens, shift, if noisy { Some(rng) } else { None })
}
