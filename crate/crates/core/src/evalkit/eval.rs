use std::io::Write;

use crate::distill::StudentModel;
use crate::error::{Error, Result};
use crate::nnblocks::ParamStore;
use crate::numcore::{Graph, Tensor};
use crate::toylm::{argmax, Language, ToyLm, PROMPT_PREFIX, PROMPT_SUFFIX};
use crate::trainer::AudioExample;

/// Produces the LM's raw (position-free) prompt rows for an example.
pub trait PromptSource {
    fn prompt_embeddings(&self, ex: &AudioExample) -> Result<Tensor<f32>>;
}

/// The teacher's own view: embedded prompt tokens around the transcript.
#[derive(Clone, Copy, Debug)]
pub struct TextPrompt<'a> {
    pub teacher: &'a ToyLm,
    pub store: &'a ParamStore<f32>,
}

impl PromptSource for TextPrompt<'_> {
    fn prompt_embeddings(&self, ex: &AudioExample) -> Result<Tensor<f32>> {
        let mut tokens = PROMPT_PREFIX.to_vec();
        tokens.extend_from_slice(&ex.transcript);
        tokens.extend_from_slice(&PROMPT_SUFFIX);
        self.teacher.embed_tokens(self.store, &tokens)
    }
}

/// The student's view: the audio tokens in place of the transcript.
#[derive(Clone, Copy, Debug)]
pub struct AudioPrompt<'a> {
    pub student: &'a StudentModel,
    pub store: &'a ParamStore<f32>,
    pub teacher: &'a ToyLm,
    pub teacher_store: &'a ParamStore<f32>,
}

impl PromptSource for AudioPrompt<'_> {
    fn prompt_embeddings(&self, ex: &AudioExample) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let sp = self.store.bind(&mut g, false);
        let t_audio = self.student.audio_tokens(&mut g, &sp, &ex.features)?;
        let audio = g.value(t_audio);
        let prefix = self.teacher.embed_tokens(self.teacher_store, &PROMPT_PREFIX)?;
        let suffix = self.teacher.embed_tokens(self.teacher_store, &PROMPT_SUFFIX)?;
        let mut data = prefix.into_data();
        data.extend_from_slice(audio.data());
        data.extend_from_slice(suffix.data());
        let width = self.teacher.spec.width;
        Tensor::new(vec![data.len() / width, width], data)
    }
}

/// Per-example evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub teacher_token: usize,
    pub student_token: usize,
    pub label_scores: Vec<f64>,
    pub gold: Option<usize>,
    pub predicted: Option<usize>,
    /// 1 when the first tokens agree (or, when classifying, when the
    /// prediction is correct), else 0.
    pub value: f64,
}

/// Greedy first response token for a prompt.
pub fn first_token(teacher: &ToyLm, store: &ParamStore<f32>, prompt: &Tensor<f32>) -> Result<usize> {
    let h = teacher.hidden_states(store, prompt)?;
    let logits = teacher.next_token_logits(store, h.row(h.rows() - 1))?;
    Ok(argmax(&logits))
}

/// Fraction of examples where the first response token under `student`
/// matches the teacher's on the transcript.
pub fn first_token_agreement(
    teacher: &ToyLm,
    teacher_store: &ParamStore<f32>,
    student: &dyn PromptSource,
    examples: &[AudioExample],
) -> Result<(f64, Vec<EvalRecord>)> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let text = TextPrompt {
        teacher,
        store: teacher_store,
    };
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = first_token(teacher, teacher_store, &text.prompt_embeddings(ex)?)?;
        let s = first_token(teacher, teacher_store, &student.prompt_embeddings(ex)?)?;
        records.push(EvalRecord {
            id: ex.id.clone(),
            teacher_token: t,
            student_token: s,
            label_scores: Vec::new(),
            gold: None,
            predicted: None,
            value: f64::from(u8::from(t == s)),
        });
    }
    let rate = records.iter().map(|r| r.value).sum::<f64>() / records.len() as f64;
    Ok((rate, records))
}

/// A synthetic classification task: the class is the transcript's first
/// token, drawn from `class_tokens`, and the label continuation for class
/// `c` is the language's reply to `class_tokens[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationTask {
    pub class_tokens: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
}

impl ClassificationTask {
    pub fn new(language: &Language, class_tokens: Vec<usize>) -> Result<Self> {
        if class_tokens.len() < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        if let Some(t) = class_tokens.iter().find(|&&t| !language.is_content(t)) {
            return Err(Error::Config(format!("class token {t} is not a content token")));
        }
        let labels = class_tokens.iter().map(|&t| vec![language.reply_to(t)]).collect();
        Ok(ClassificationTask { class_tokens, labels })
    }

    pub fn class_ids(&self) -> Vec<usize> {
        (0..self.class_tokens.len()).collect()
    }
}

/// Label log-probability classification: every label is scored after the
/// prompt and the argmax (ties to the lowest index) is the prediction.
pub fn classify(
    teacher: &ToyLm,
    teacher_store: &ParamStore<f32>,
    source: &dyn PromptSource,
    task: &ClassificationTask,
    examples: &[AudioExample],
) -> Result<Vec<EvalRecord>> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to classify".into()));
    }
    examples
        .iter()
        .map(|ex| {
            let gold = ex
                .class
                .ok_or_else(|| Error::Data(format!("example {} has no class", ex.id)))?;
            if gold >= task.labels.len() {
                return Err(Error::Data(format!("example {} has class {gold} outside the task", ex.id)));
            }
            let prompt = source.prompt_embeddings(ex)?;
            let scores = teacher.score_labels(teacher_store, &prompt, &task.labels)?;
            let predicted = argmax(&scores);
            Ok(EvalRecord {
                id: ex.id.clone(),
                teacher_token: task.labels[gold][0],
                student_token: task.labels[predicted][0],
                label_scores: scores,
                gold: Some(gold),
                predicted: Some(predicted),
                value: f64::from(u8::from(gold == predicted)),
            })
        })
        .collect()
}

pub const RECORDS_HEADER: &str = "id,teacher_token,student_token,gold,predicted,value,label_scores";

/// Per-example records as CSV; label scores are `;`-separated.
pub fn write_records_csv<W: Write>(records: &[EvalRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RECORDS_HEADER}")?;
    let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        let scores: Vec<String> = r.label_scores.iter().map(|s| s.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.id,
            r.teacher_token,
            r.student_token,
            opt(r.gold),
            opt(r.predicted),
            r.value,
            scores.join(";")
        )?;
    }
    Ok(())
}
