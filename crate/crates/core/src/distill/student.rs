use crate::audiofront::AudioEncoder;
use crate::error::Result;
use crate::nnblocks::{Binding, ParamStore};
use crate::numcore::{Graph, Real, Rng, Tensor, Var};
use crate::qformer::{init_from_decoder, AsrModel, InitMode, QFormerAdapter, QFormerSpec};
use crate::toylm::{argmax, ToyLm, PROMPT_PREFIX, PROMPT_SUFFIX};

pub const STUDENT_ENCODER: &str = "student.encoder";
pub const STUDENT_QFORMER: &str = "student.qformer";

/// Audio path of the student: encoder, then the Q-Former adapter. The
/// parameters live in a separate store.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub encoder: AudioEncoder,
    pub adapter: QFormerAdapter,
    pub freeze_encoder: bool,
}

impl StudentModel {
    /// Encoder copied from the donor ASR model; adapter initialized from
    /// the donor decoder or from scratch.
    pub fn from_donor(
        donor: &AsrModel,
        spec: QFormerSpec,
        mode: InitMode,
        freeze_encoder: bool,
        rng: &mut Rng,
    ) -> Result<(StudentModel, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let encoder = AudioEncoder::new(&mut store, STUDENT_ENCODER, donor.encoder.spec, rng)?;
        store.copy_prefixed(&format!("{STUDENT_ENCODER}."), &donor.store, "asr.encoder.")?;
        let adapter = match mode {
            InitMode::Decoder => init_from_decoder(&mut store, STUDENT_QFORMER, spec, &donor.decoder, &donor.store, rng)?,
            InitMode::Scratch => QFormerAdapter::scratch(&mut store, STUDENT_QFORMER, spec, rng)?,
        };
        Ok((
            StudentModel {
                encoder,
                adapter,
                freeze_encoder,
            },
            store,
        ))
    }

    /// Adapter weights are always trainable; encoder weights unless frozen.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Binding {
        let freeze = self.freeze_encoder;
        store.bind_with(g, |name| !(freeze && name.starts_with(STUDENT_ENCODER)))
    }

    /// `t^audio`, `|Q| × H`, for normalized log-mel features.
    pub fn audio_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Binding, features: &Tensor<f32>) -> Result<Var> {
        let mel = g.constant(features.cast::<T>());
        let a = self.encoder.forward(g, p, mel)?;
        self.adapter.forward(g, p, a)
    }

    /// The teacher's last hidden row with `t_audio` in the transcript slot
    /// of the prompt template, `1 × H`.
    pub fn first_token_hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        t_audio: Var,
        teacher: &ToyLm,
        tp: &Binding,
    ) -> Result<Var> {
        let h = teacher.forward_mixed(g, tp, &PROMPT_PREFIX, t_audio, &PROMPT_SUFFIX)?;
        let rows = g.value(h).rows();
        g.slice_rows(h, rows - 1, 1)
    }

    /// Next-token logits at the first response position, audio path.
    pub fn first_token_logits(
        &self,
        store: &ParamStore<f32>,
        teacher: &ToyLm,
        teacher_store: &ParamStore<f32>,
        features: &Tensor<f32>,
    ) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let sp = store.bind(&mut g, false);
        let tp = teacher_store.bind(&mut g, false);
        let t_audio = self.audio_tokens(&mut g, &sp, features)?;
        let h = self.first_token_hidden(&mut g, t_audio, teacher, &tp)?;
        let row = g.value(h).data().to_vec();
        teacher.next_token_logits(teacher_store, &row)
    }
}

/// What the frozen teacher contributes for one transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    /// Last hidden row of the text prompt, `1 × H`.
    pub h_t: Tensor<f32>,
    /// Raw text embeddings of the transcript, `N × H`.
    pub t_text: Tensor<f32>,
    /// Argmax of the teacher's first-response distribution.
    pub first_token: usize,
}

/// Runs the teacher on `PROMPT_PREFIX transcript PROMPT_SUFFIX`.
pub fn teacher_target(teacher: &ToyLm, store: &ParamStore<f32>, transcript: &[usize]) -> Result<TeacherTarget> {
    let mut tokens = PROMPT_PREFIX.to_vec();
    tokens.extend_from_slice(transcript);
    tokens.extend_from_slice(&PROMPT_SUFFIX);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let h = teacher.forward_tokens(&mut g, &p, &tokens)?;
    let hv = g.value(h);
    let last = hv.slice_rows(hv.rows() - 1, 1)?;
    let logits = teacher.next_token_logits(store, last.data())?;
    Ok(TeacherTarget {
        h_t: last,
        t_text: teacher.embed_tokens(store, transcript)?,
        first_token: argmax(&logits),
    })
}
