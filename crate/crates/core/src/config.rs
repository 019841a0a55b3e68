//! The run configuration document and the derived component settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audiofront::{EncoderSpec, MelGeometry, SynthSpec};
use crate::distill::{AlignOptions, Arm};
use crate::error::{Error, Result};
use crate::evalkit::DEFAULT_RESAMPLES;
use crate::numcore::Rng;
use crate::qformer::{DecoderSpec, DonorConfig, InitMode, QFormerSpec};
use crate::toylab::{ToyRunConfig, DEFAULT_DIMS, DEFAULT_LR_SWEEP};
use crate::toylm::{CorpusSpec, Language, LmSpec, LmTrainConfig};
use crate::trainer::{ExampleSpec, TrainConfig};

/// Floating-point precision of training. Only `f32` trains; `f64` is used
/// by gradient checking regardless of this setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Waveform synthesis and log-mel geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub tone_ms: f64,
    pub tone_amplitude: f64,
    pub noise_amplitude: f64,
    pub pitch_range: (f64, f64),
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 16_000,
            n_fft: 400,
            hop: 160,
            n_mels: 16,
            tone_ms: 40.0,
            tone_amplitude: 0.5,
            noise_amplitude: 0.01,
            pitch_range: (0.9, 1.1),
        }
    }
}

/// Model dimensions. `audio_width` is `h`, `lm_width` is `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ffn_hidden: usize,
    pub lm_max_positions: usize,
    pub audio_width: usize,
    pub encoder_layers: usize,
    /// Layers of the donor decoder and of the Q-Former.
    pub adapter_layers: usize,
    pub audio_heads: usize,
    pub audio_ffn_hidden: usize,
    pub decoder_max_positions: usize,
    pub queries: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            lm_width: 64,
            lm_layers: 2,
            lm_heads: 4,
            lm_ffn_hidden: 128,
            lm_max_positions: 32,
            audio_width: 32,
            encoder_layers: 2,
            adapter_layers: 2,
            audio_heads: 4,
            audio_ffn_hidden: 64,
            decoder_max_positions: 16,
            queries: 16,
        }
    }
}

/// The synthetic language and the sizes of the audio splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Likely successors per token in the language's bigram structure.
    pub successors: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Extra test examples carrying a class label.
    pub class_test: usize,
    /// Number of classes; class `c` starts with the `c`-th content token.
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Write WAV files; otherwise records carry the `synthetic` marker and
    /// audio is re-rendered when the manifest is loaded.
    pub write_audio: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            successors: 3,
            train: 3000,
            dev: 100,
            test: 500,
            class_test: 200,
            classes: 4,
            min_len: 2,
            max_len: 8,
            write_audio: true,
        }
    }
}

/// Teacher corpus and pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub train_sequences: usize,
    pub held_out_sequences: usize,
    pub dialogue_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let t = LmTrainConfig::default();
        TeacherConfig {
            train_sequences: 4000,
            held_out_sequences: 400,
            dialogue_fraction: 0.5,
            min_len: 2,
            max_len: 16,
            steps: t.steps,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
        }
    }
}

/// Donor ASR pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DonorTrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
    pub eval_every: usize,
}

impl Default for DonorTrainConfig {
    fn default() -> Self {
        let d = DonorConfig::default();
        DonorTrainConfig {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            warmup_fraction: d.warmup_fraction,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            target_accuracy: d.target_accuracy,
            min_accuracy: d.min_accuracy,
            eval_every: d.eval_every,
        }
    }
}

/// Distillation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub arm: Arm,
    pub init_mode: InitMode,
    pub freeze_encoder: bool,
    pub lambda_con: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub align_squared: bool,
    pub align_truncate: bool,
    pub distill_squared: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        DistillConfig {
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            arm: t.arm,
            init_mode: t.init_mode,
            freeze_encoder: t.freeze_encoder,
            lambda_con: t.lambda_con,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
            align_squared: t.align.squared,
            align_truncate: t.align.truncate,
            distill_squared: t.distill_squared,
        }
    }
}

/// The toy hidden-state experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToylabConfig {
    pub dims: Vec<usize>,
    pub vocab: usize,
    pub steps: usize,
    pub runs: usize,
    pub lr: f64,
    /// Rates tried in lr-sweep mode.
    pub lr_sweep: Vec<f64>,
    pub l2_squared: bool,
}

impl Default for ToylabConfig {
    fn default() -> Self {
        let t = ToyRunConfig::default();
        ToylabConfig {
            dims: DEFAULT_DIMS.to_vec(),
            vocab: t.vocab,
            steps: t.steps,
            runs: t.runs,
            lr: t.lr,
            lr_sweep: DEFAULT_LR_SWEEP.to_vec(),
            l2_squared: t.l2_squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bootstrap resamples.
    pub resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            resamples: DEFAULT_RESAMPLES,
        }
    }
}

/// Everything a command needs besides its input files. Every field has a
/// default, so `{}` is a complete configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub donor: DonorTrainConfig,
    pub train: DistillConfig,
    pub toylab: ToylabConfig,
    pub eval: EvalConfig,
}

/// RNG stream roles under the master seed.
const STREAM_LANGUAGE: u64 = 1;
const STREAM_SPLITS: u64 = 2;
const STREAM_RENDER: u64 = 3;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks; per-component checks happen where the settings
    /// are used.
    pub fn validate(&self) -> Result<()> {
        if self.precision != Precision::F32 {
            return Err(Error::Config("training runs in f32 only; set precision to \"f32\"".into()));
        }
        let m = &self.model;
        if m.queries == 0 {
            return Err(Error::Config("model.queries must be >= 1".into()));
        }
        if m.queries > m.decoder_max_positions {
            return Err(Error::Config(format!(
                "model.queries ({}) exceeds model.decoder_max_positions ({})",
                m.queries, m.decoder_max_positions
            )));
        }
        let d = &self.data;
        if d.max_len + 1 > m.decoder_max_positions {
            return Err(Error::Config(format!(
                "data.max_len ({}) leaves no room for BOS within {} decoder positions",
                d.max_len, m.decoder_max_positions
            )));
        }
        if d.max_len >= m.queries && !self.train.align_truncate {
            return Err(Error::Config(format!(
                "data.max_len ({}) must be below model.queries ({}) unless train.align_truncate is set",
                d.max_len, m.queries
            )));
        }
        let content = m.vocab.saturating_sub(crate::toylm::FIRST_CONTENT);
        if d.class_test > 0 && (d.classes < 2 || d.classes > content) {
            return Err(Error::Config(format!(
                "data.classes must lie in 2..={content}, got {}",
                d.classes
            )));
        }
        if self.eval.resamples < 1000 {
            return Err(Error::Config(format!(
                "eval.resamples must be >= 1000, got {}",
                self.eval.resamples
            )));
        }
        Ok(())
    }

    pub fn language(&self) -> Result<Language> {
        Language::new(self.model.vocab, self.data.successors, &mut self.language_rng())
    }

    /// The language is drawn first from this stream, then the teacher
    /// corpus continues on it.
    fn language_rng(&self) -> Rng {
        Rng::new(self.seed).substream(STREAM_LANGUAGE)
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let t = &self.teacher;
        CorpusSpec {
            train_sequences: t.train_sequences,
            held_out_sequences: t.held_out_sequences,
            dialogue_fraction: t.dialogue_fraction,
            min_len: t.min_len,
            max_len: t.max_len,
        }
    }

    /// Language and teacher corpus from one stream.
    pub fn corpus(&self) -> Result<crate::toylm::SyntheticCorpus> {
        let mut rng = self.language_rng();
        let language = Language::new(self.model.vocab, self.data.successors, &mut rng)?;
        crate::toylm::SyntheticCorpus::generate(language, self.corpus_spec(), &mut rng)
    }

    pub fn lm_spec(&self) -> LmSpec {
        let m = &self.model;
        LmSpec {
            vocab: m.vocab,
            width: m.lm_width,
            layers: m.lm_layers,
            heads: m.lm_heads,
            ffn_hidden: m.lm_ffn_hidden,
            max_positions: m.lm_max_positions,
        }
    }

    pub fn lm_train(&self) -> LmTrainConfig {
        let t = &self.teacher;
        LmTrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: self.seed,
        }
    }

    pub fn geometry(&self) -> MelGeometry {
        MelGeometry {
            n_fft: self.audio.n_fft,
            hop: self.audio.hop,
            n_mels: self.audio.n_mels,
        }
    }

    pub fn synth_spec(&self, language: &Language) -> Result<SynthSpec> {
        let a = &self.audio;
        let tokens: Vec<usize> = language.content_tokens().collect();
        SynthSpec::for_tokens(
            &tokens,
            a.n_mels,
            a.sample_rate,
            a.tone_ms,
            a.tone_amplitude,
            a.noise_amplitude,
            a.pitch_range,
        )
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        let m = &self.model;
        EncoderSpec {
            n_mels: self.audio.n_mels,
            width: m.audio_width,
            layers: m.encoder_layers,
            heads: m.audio_heads,
            ffn_hidden: m.audio_ffn_hidden,
        }
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        let m = &self.model;
        DecoderSpec {
            vocab: m.vocab,
            width: m.audio_width,
            layers: m.adapter_layers,
            heads: m.audio_heads,
            ffn_hidden: m.audio_ffn_hidden,
            max_positions: m.decoder_max_positions,
        }
    }

    pub fn qformer_spec(&self) -> QFormerSpec {
        let m = &self.model;
        QFormerSpec {
            n_queries: m.queries,
            width: m.audio_width,
            lm_width: m.lm_width,
            layers: m.adapter_layers,
            heads: m.audio_heads,
            ffn_hidden: m.audio_ffn_hidden,
        }
    }

    pub fn donor_config(&self) -> DonorConfig {
        let d = &self.donor;
        DonorConfig {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            warmup_fraction: d.warmup_fraction,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            seed: self.seed,
            target_accuracy: d.target_accuracy,
            min_accuracy: d.min_accuracy,
            eval_every: d.eval_every,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            seed: self.seed,
            arm: t.arm,
            init_mode: t.init_mode,
            freeze_encoder: t.freeze_encoder,
            lambda_con: t.lambda_con,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
            align: AlignOptions {
                squared: t.align_squared,
                truncate: t.align_truncate,
            },
            distill_squared: t.distill_squared,
        }
    }

    /// Base toy-run settings; the sweep fills in `dim` (and `lr`).
    pub fn toy_config(&self) -> ToyRunConfig {
        let t = &self.toylab;
        ToyRunConfig {
            dim: t.dims.first().copied().unwrap_or(1),
            vocab: t.vocab,
            steps: t.steps,
            runs: t.runs,
            lr: t.lr,
            seed: self.seed,
            l2_squared: t.l2_squared,
        }
    }

    /// Transcript draws for one split.
    pub fn example_spec(&self, count: usize, classes: Option<Vec<usize>>) -> ExampleSpec {
        ExampleSpec {
            count,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            classes,
        }
    }

    /// Class tokens of the classification task: the first `classes`
    /// content tokens.
    pub fn class_tokens(&self, language: &Language) -> Vec<usize> {
        language.content_tokens().take(self.data.classes).collect()
    }

    /// Stream for synthesizing split `index` (0 train, 1 dev, 2 test,
    /// 3 classified test).
    pub fn split_rng(&self, index: u64) -> Rng {
        Rng::new(self.seed).substream(STREAM_SPLITS).substream(index)
    }

    /// Stream for re-rendering the audio of manifest record `line`.
    pub fn render_rng(&self, line: u64) -> Rng {
        Rng::new(self.seed).substream(STREAM_RENDER).substream(line)
    }
}
