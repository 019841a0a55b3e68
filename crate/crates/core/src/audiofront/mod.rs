//! Synthetic speech and the audio feature pipeline: waveform, log-mel,
//! convolution stem and transformer encoder.

mod encoder;
mod mel;
mod synth;
mod wav;

pub use encoder::{encode_audio, AudioEncoder, EncoderSpec};
pub use mel::{
    frame_count, hz_to_mel, mel_centers, mel_filterbank, mel_spectrogram, mel_to_hz, normalize_log_mel,
    MelGeometry, MelSpectrogram, ENERGY_FLOOR,
};
pub use synth::{synth_utterance, SynthSpec};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Data(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[cfg(test)]
mod tests;
