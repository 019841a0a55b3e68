use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::Waveform;

/// Energies are floored here before the natural log.
pub const ENERGY_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `n_mels` triangular filters spanning 0 Hz to
/// Nyquist.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_points(n_mels, sample_rate)[1..=n_mels].to_vec()
}

fn mel_points(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let pts = mel_points(n_mels, sample_rate);
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-mel energies, `frames × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f32>,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }
}

pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> Option<usize> {
    (len >= n_fft && hop > 0).then(|| (len - n_fft) / hop + 1)
}

/// Hann-windowed power spectrum per frame, triangular mel filterbank,
/// energies floored at [`ENERGY_FLOOR`], natural log.
pub fn mel_spectrogram(w: &Waveform, n_fft: usize, hop: usize, n_mels: usize) -> Result<MelSpectrogram> {
    if n_fft < 2 || hop == 0 || n_mels == 0 {
        return Err(Error::Config(format!(
            "invalid mel geometry n_fft={n_fft} hop={hop} n_mels={n_mels}"
        )));
    }
    let frames = frame_count(w.samples.len(), n_fft, hop).ok_or_else(|| {
        Error::Data(format!(
            "waveform of {} samples is shorter than n_fft={}",
            w.samples.len(),
            n_fft
        ))
    })?;
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
        .collect();
    let bank = mel_filterbank(n_mels, n_fft, w.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames * n_mels);
    let floor_ln = ENERGY_FLOOR.ln();
    for f in 0..frames {
        let start = f * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(w.samples[start + n] as f64 * window[n], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            let v = if e > ENERGY_FLOOR { e.ln() } else { floor_ln };
            out.push(v as f32);
        }
    }
    Ok(MelSpectrogram {
        values: Tensor::new(vec![frames, n_mels], out)?,
        n_fft,
        hop,
        n_mels,
    })
}

/// Dynamic-range compression applied before the convolution stem: values
/// are expressed in log10 units, clipped to 8 decades below the utterance
/// maximum, then mapped by `(x + 4) / 4`.
pub fn normalize_log_mel(mel: &MelSpectrogram) -> Tensor<f32> {
    let ln10 = std::f32::consts::LN_10;
    let max = mel.values.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) / ln10;
    mel.values.map(|x| ((x / ln10).max(max - 8.0) + 4.0) / 4.0)
}

/// STFT and filterbank geometry of the feature pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MelGeometry {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelGeometry {
    fn default() -> Self {
        MelGeometry {
            n_fft: 400,
            hop: 160,
            n_mels: 16,
        }
    }
}

impl MelGeometry {
    /// Normalized log-mel features, `frames × n_mels`.
    pub fn features(&self, w: &Waveform) -> Result<Tensor<f32>> {
        let mel = mel_spectrogram(w, self.n_fft, self.hop, self.n_mels)?;
        Ok(normalize_log_mel(&mel))
    }
}
