use crate::audiofront::{synth_utterance, MelGeometry, SynthSpec, Waveform};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::toylm::Language;

/// One (audio, transcript) supervision pair with its precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioExample {
    pub id: String,
    pub waveform: Waveform,
    pub transcript: Vec<usize>,
    /// Normalized log-mel, `frames × n_mels`.
    pub features: Tensor<f32>,
    /// Class index for the synthetic classification task.
    pub class: Option<usize>,
}

impl AudioExample {
    pub fn new(id: impl Into<String>, waveform: Waveform, transcript: Vec<usize>, geometry: &MelGeometry) -> Result<Self> {
        let id = id.into();
        if transcript.is_empty() {
            return Err(Error::Data(format!("example {id} has an empty transcript")));
        }
        let features = geometry.features(&waveform)?;
        Ok(AudioExample {
            id,
            waveform,
            transcript,
            features,
            class: None,
        })
    }
}

/// How synthetic transcripts are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSpec {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// When set, example `i` starts with `classes[c]` for a uniformly drawn
    /// class `c`, recorded on the example.
    pub classes: Option<Vec<usize>>,
}

/// Draws transcripts from the language, renders them and extracts features.
/// Every example uses its own RNG substream of `rng`.
pub fn synthesize_examples(
    language: &Language,
    synth: &SynthSpec,
    geometry: &MelGeometry,
    spec: &ExampleSpec,
    id_prefix: &str,
    rng: &Rng,
) -> Result<Vec<AudioExample>> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "transcript lengths {}..={} are invalid",
            spec.min_len, spec.max_len
        )));
    }
    if let Some(classes) = &spec.classes {
        if classes.is_empty() || classes.iter().any(|&t| !language.is_content(t)) {
            return Err(Error::Config(format!("invalid class tokens {classes:?}")));
        }
    }
    (0..spec.count)
        .map(|i| {
            let mut r = rng.substream(i as u64);
            let class = spec.classes.as_ref().map(|c| r.below(c.len()));
            let first = class.map(|c| spec.classes.as_ref().unwrap()[c]);
            let transcript = language.transcript(&mut r, spec.min_len, spec.max_len, first);
            let wave = synth_utterance(&transcript, synth, &mut r)?;
            let mut ex = AudioExample::new(format!("{id_prefix}{i:05}"), wave, transcript, geometry)?;
            ex.class = class;
            Ok(ex)
        })
        .collect()
}
