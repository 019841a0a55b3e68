use super::*;
use crate::audiofront::{MelGeometry, SynthSpec};
use crate::error::Error;
use crate::nnblocks::ParamStore;
use crate::numcore::{Rng, Tensor};
use crate::toylm::{Language, LmSpec, ToyLm, PROMPT_PREFIX, PROMPT_SUFFIX};
use crate::trainer::{synthesize_examples, AudioExample, ExampleSpec};

/// Confusion-matrix oracle: builds the full matrix, then averages per-class
/// F1 by gold support.
fn f1_oracle(preds: &[usize], golds: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0.0f64; k]; k];
    for (&p, &g) in preds.iter().zip(golds) {
        m[g][p] += 1.0;
    }
    let n = golds.len() as f64;
    (0..k)
        .map(|c| {
            let tp = m[c][c];
            let support: f64 = m[c].iter().sum();
            let predicted: f64 = (0..k).map(|r| m[r][c]).sum();
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if support > 0.0 { tp / support } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            f1 * support / n
        })
        .sum()
}

#[test]
fn accuracy_cases() {
    assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
    assert_eq!(accuracy(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
    assert_eq!(accuracy(&[2, 1, 0, 3], &[2, 1, 0, 0]).unwrap(), 0.75);
    assert!(matches!(accuracy(&[1, 2], &[1]), Err(Error::Usage(_))));
}

#[test]
fn weighted_f1_hand_cases() {
    assert_eq!(weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], &[0, 1, 2]).unwrap(), 1.0);
    let golds = [0, 0, 1, 1];
    let f1 = weighted_f1(&[0, 0, 0, 0], &golds, &[0, 1]).unwrap();
    assert!((f1 - 1.0 / 3.0).abs() < 1e-12, "{f1}");
    assert!(matches!(weighted_f1(&[0, 5], &[0, 1], &[0, 1]), Err(Error::Data(_))));
}

#[test]
fn weighted_f1_matches_confusion_matrix_oracle() {
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let n = 1 + rng.below(40);
        let golds: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let preds: Vec<usize> = golds
            .iter()
            .map(|&g| if rng.uniform() < 0.6 { g } else { rng.below(3) })
            .collect();
        let got = weighted_f1(&preds, &golds, &[0, 1, 2]).unwrap();
        let want = f1_oracle(&preds, &golds, 3);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got <= 1.0);
        assert_eq!(got == 1.0, preds == golds);
    }
}

#[test]
fn bootstrap_identical_systems() {
    let a: Vec<f64> = (0..30).map(|i| (i % 3) as f64).collect();
    let r = paired_bootstrap(&a, &a, 1000, 1).unwrap();
    assert_eq!(r.observed_diff, 0.0);
    assert_eq!(r.p_value, 1.0);
    assert!(r.ci_low <= r.ci_high);
}

#[test]
fn bootstrap_constant_shift() {
    let mut rng = Rng::new(2);
    let b: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
    let a: Vec<f64> = b.iter().map(|x| x + 10.0).collect();
    let r = paired_bootstrap(&a, &b, DEFAULT_RESAMPLES, 9).unwrap();
    assert!(r.p_value <= 2.0 / DEFAULT_RESAMPLES as f64, "{r:?}");
    assert!((r.observed_diff - 10.0).abs() < 1e-9);
    assert!(r.ci_low <= r.ci_high);
}

#[test]
fn bootstrap_rejects_bad_input() {
    assert!(matches!(paired_bootstrap(&[1.0, 2.0], &[1.0], 1000, 0), Err(Error::Usage(_))));
    assert!(matches!(paired_bootstrap(&[1.0], &[1.0], 1000, 0), Err(Error::Usage(_))));
    assert!(matches!(paired_bootstrap(&[1.0, 2.0], &[1.0, 2.0], 10, 0), Err(Error::Usage(_))));
}

#[test]
fn bootstrap_ignores_pair_order() {
    let mut rng = Rng::new(4);
    let a: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..40).map(|_| rng.normal() + 0.2).collect();
    let mut idx: Vec<usize> = (0..40).collect();
    rng.shuffle(&mut idx);
    let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let r1 = paired_bootstrap(&a, &b, 2000, 5).unwrap();
    let r2 = paired_bootstrap(&pa, &pb, 2000, 5).unwrap();
    assert_eq!(r1.p_value, r2.p_value);
    assert_eq!((r1.ci_low, r1.ci_high), (r2.ci_low, r2.ci_high));
}

#[test]
fn bootstrap_p_value_stays_in_unit_interval() {
    let mut rng = Rng::new(8);
    for t in 0..20 {
        let a: Vec<f64> = (0..10).map(|_| rng.below(2) as f64).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.below(2) as f64).collect();
        let r = paired_bootstrap(&a, &b, 200, t).unwrap();
        assert!((0.0..=1.0).contains(&r.p_value));
        assert!(r.ci_low <= r.ci_high);
    }
}

struct Fixture {
    lm: ToyLm,
    store: ParamStore<f32>,
    examples: Vec<AudioExample>,
    language: Language,
}

fn fixture(count: usize) -> Fixture {
    let mut rng = Rng::new(11);
    let language = Language::new(16, 2, &mut rng).unwrap();
    let mut store = ParamStore::new();
    let spec = LmSpec {
        vocab: 16,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        max_positions: 16,
    };
    let mut lm = ToyLm::new(&mut store, "lm", spec, &mut rng).unwrap();
    lm.frozen = true;
    let toks: Vec<usize> = language.content_tokens().collect();
    let synth = SynthSpec::for_tokens(&toks, 8, 16000, 40.0, 0.5, 0.0, (1.0, 1.0)).unwrap();
    let geometry = MelGeometry {
        n_fft: 400,
        hop: 160,
        n_mels: 8,
    };
    let ex_spec = ExampleSpec {
        count,
        min_len: 1,
        max_len: 3,
        classes: Some(vec![toks[0], toks[1]]),
    };
    let examples = synthesize_examples(&language, &synth, &geometry, &ex_spec, "e", &Rng::new(12)).unwrap();
    Fixture {
        lm,
        store,
        examples,
        language,
    }
}

/// Prompts with the transcript replaced by a fixed token, or by the true
/// transcript for the listed example ids.
struct Substituted<'a> {
    fx: &'a Fixture,
    exact: Vec<String>,
}

impl PromptSource for Substituted<'_> {
    fn prompt_embeddings(&self, ex: &AudioExample) -> crate::Result<Tensor<f32>> {
        let body = if self.exact.contains(&ex.id) {
            ex.transcript.clone()
        } else {
            vec![self.fx.language.content_tokens().last().unwrap()]
        };
        let mut tokens = PROMPT_PREFIX.to_vec();
        tokens.extend(body);
        tokens.extend_from_slice(&PROMPT_SUFFIX);
        self.fx.lm.embed_tokens(&self.fx.store, &tokens)
    }
}

#[test]
fn text_prompt_agrees_with_itself() {
    let fx = fixture(12);
    let text = TextPrompt {
        teacher: &fx.lm,
        store: &fx.store,
    };
    let (rate, records) = first_token_agreement(&fx.lm, &fx.store, &text, &fx.examples).unwrap();
    assert_eq!(rate, 1.0);
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.teacher_token < 16 && r.student_token == r.teacher_token));
    assert!(matches!(
        first_token_agreement(&fx.lm, &fx.store, &text, &[]),
        Err(Error::Data(_))
    ));
}

#[test]
fn substituting_teacher_prompts_never_lowers_agreement() {
    let fx = fixture(20);
    let mut exact = Vec::new();
    let mut last = -1.0;
    for ex in &fx.examples {
        let src = Substituted {
            fx: &fx,
            exact: exact.clone(),
        };
        let (rate, _) = first_token_agreement(&fx.lm, &fx.store, &src, &fx.examples).unwrap();
        assert!(rate >= last, "{rate} < {last}");
        last = rate;
        exact.push(ex.id.clone());
    }
}

#[test]
fn classification_records() {
    let fx = fixture(10);
    let classes: Vec<usize> = fx.language.content_tokens().take(2).collect();
    let task = ClassificationTask::new(&fx.language, classes).unwrap();
    let text = TextPrompt {
        teacher: &fx.lm,
        store: &fx.store,
    };
    let records = classify(&fx.lm, &fx.store, &text, &task, &fx.examples).unwrap();
    assert_eq!(records.len(), 10);
    for (r, ex) in records.iter().zip(&fx.examples) {
        assert_eq!(r.gold, ex.class);
        assert_eq!(r.label_scores.len(), 2);
        let p = r.predicted.unwrap();
        assert!(r.label_scores.iter().all(|&s| s <= r.label_scores[p]));
    }
    let preds: Vec<usize> = records.iter().map(|r| r.predicted.unwrap()).collect();
    let golds: Vec<usize> = records.iter().map(|r| r.gold.unwrap()).collect();
    let acc = accuracy(&preds, &golds).unwrap();
    let mean_value = records.iter().map(|r| r.value).sum::<f64>() / 10.0;
    assert!((acc - mean_value).abs() < 1e-12);
    let one = fx.language.content_tokens().next().unwrap();
    assert!(ClassificationTask::new(&fx.language, vec![one]).is_err());
}

#[test]
fn records_csv_shape() {
    let rec = EvalRecord {
        id: "a".into(),
        teacher_token: 3,
        student_token: 4,
        label_scores: vec![-1.5, -0.25],
        gold: Some(1),
        predicted: None,
        value: 0.0,
    };
    let mut out = Vec::new();
    write_records_csv(&[rec], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], RECORDS_HEADER);
    assert_eq!(lines[1], "a,3,4,1,,0,-1.5;-0.25");
}
