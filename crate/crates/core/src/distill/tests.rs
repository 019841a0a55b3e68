use proptest::prelude::*;

use super::*;
use crate::audiofront::EncoderSpec;
use crate::error::Error;
use crate::nnblocks::ParamStore;
use crate::numcore::{grad_check, Graph, Tensor};
use crate::qformer::{AsrModel, DecoderSpec, InitMode, QFormerSpec};
use crate::toylm::{LmSpec, ToyLm, PROMPT_PREFIX, PROMPT_SUFFIX};

type Rng = crate::numcore::Rng;

fn brute_alignment(audio: &Tensor<f64>, text: &Tensor<f64>) -> f64 {
    let (q, n) = (audio.rows(), text.rows());
    let mut total = 0.0;
    for k in 0..n {
        let mut s = 0.0;
        for j in 0..text.cols() {
            let d = text.at(k, j) - audio.at(q - n + k, j);
            s += d * d;
        }
        total += s.sqrt();
    }
    total
}

#[test]
fn alignment_hand_values() {
    let text = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let audio = Tensor::new(vec![2, 2], vec![9.0, 9.0, 0.0, 0.0]).unwrap();
    let opts = AlignOptions::default();
    assert_eq!(token_alignment_value(&audio, &text, opts).unwrap(), 5.0);
    let squared = AlignOptions {
        squared: true,
        ..opts
    };
    assert_eq!(token_alignment_value(&audio, &text, squared).unwrap(), 25.0);

    let mut rng = Rng::new(1);
    let text = rng.normal_tensor::<f64>(vec![3, 5], 1.0);
    let mut rows: Vec<Vec<f64>> = vec![vec![7.0; 5], vec![-2.0; 5]];
    rows.extend((0..3).map(|i| text.row(i).to_vec()));
    let audio = Tensor::from_rows(&rows).unwrap();
    assert_eq!(token_alignment_value(&audio, &text, opts).unwrap(), 0.0);
}

#[test]
fn alignment_matches_brute_force_on_random_instance() {
    let mut rng = Rng::new(2);
    let audio = rng.normal_tensor::<f64>(vec![4, 6], 1.0);
    let text = rng.normal_tensor::<f64>(vec![2, 6], 1.0);
    let got = token_alignment_value(&audio, &text, AlignOptions::default()).unwrap();
    assert!((got - brute_alignment(&audio, &text)).abs() < 1e-10);
}

#[test]
fn alignment_requires_more_queries_than_text_tokens() {
    let mut rng = Rng::new(3);
    let audio = rng.normal_tensor::<f64>(vec![3, 4], 1.0);
    let text = rng.normal_tensor::<f64>(vec![3, 4], 1.0);
    assert!(matches!(
        token_alignment_value(&audio, &text, AlignOptions::default()),
        Err(Error::Alignment(_))
    ));
    let truncate = AlignOptions {
        truncate: true,
        ..AlignOptions::default()
    };
    let got = token_alignment_value(&audio, &text, truncate).unwrap();
    let kept = text.slice_rows(0, 2).unwrap();
    assert!((got - brute_alignment(&audio, &kept)).abs() < 1e-12);
    let narrow = rng.normal_tensor::<f64>(vec![1, 3], 1.0);
    assert!(matches!(
        token_alignment_value(&audio, &narrow, AlignOptions::default()),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn alignment_is_order_sensitive() {
    let mut rng = Rng::new(4);
    let audio = rng.normal_tensor::<f64>(vec![5, 4], 1.0);
    let text = rng.normal_tensor::<f64>(vec![3, 4], 1.0);
    let swapped = Tensor::from_rows(&[text.row(1).to_vec(), text.row(0).to_vec(), text.row(2).to_vec()]).unwrap();
    let a = token_alignment_value(&audio, &text, AlignOptions::default()).unwrap();
    let b = token_alignment_value(&audio, &swapped, AlignOptions::default()).unwrap();
    assert!((a - b).abs() > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn alignment_oracle_holds(n in 1usize..5, extra in 1usize..4, h in 1usize..7, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let audio = rng.normal_tensor::<f64>(vec![n + extra, h], 2.0);
        let text = rng.normal_tensor::<f64>(vec![n, h], 2.0);
        let got = token_alignment_value(&audio, &text, AlignOptions::default()).unwrap();
        prop_assert!((got - brute_alignment(&audio, &text)).abs() < 1e-10);
    }
}

fn distill_value(h_s: &[f64], h_t: &[f64]) -> Result<f64, Error> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::from_vec(h_s.to_vec()));
    let t = g.constant(Tensor::from_vec(h_t.to_vec()));
    let l = distill_loss(&mut g, s, t, false)?;
    Ok(g.value(l).data()[0])
}

#[test]
fn distill_loss_values_and_gradient() {
    let h_t: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
    assert_eq!(distill_value(&h_t, &h_t).unwrap(), 0.0);
    let mut h_s = h_t.clone();
    h_s[0] += 3.0;
    h_s[1] += 4.0;
    assert!((distill_value(&h_s, &h_t).unwrap() - 5.0).abs() < 1e-12);
    assert!(matches!(distill_value(&h_s[..7], &h_t), Err(Error::Dimension(_))));

    let mut rng = Rng::new(5);
    let x = rng.normal_tensor::<f64>(vec![1, 8], 1.0);
    let target = rng.normal_tensor::<f64>(vec![1, 8], 1.0);
    let report = grad_check(
        |g, v| {
            let t = g.constant(target.clone());
            distill_loss(g, v, t, false)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    let diff: Vec<f64> = x.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let t = g.constant(target.clone());
    let l = distill_loss(&mut g, xv, t, false).unwrap();
    g.backward(l).unwrap();
    for (a, d) in g.grad(xv).unwrap().data().iter().zip(&diff) {
        assert!((a - d / norm).abs() < 1e-12);
    }
}

#[test]
fn reference_kl_hand_cases() {
    let mut rng = Rng::new(6);
    let o = rng.normal_tensor::<f64>(vec![16, 8], 1.0);
    let h: Vec<f64> = rng.normal_tensor::<f64>(vec![8], 1.0).into_data();
    assert!(reference_kl(&h, &h, &o).unwrap() <= 1e-9);

    // V = 2, H = 1, O = [1, -1]: logits ±h, so p = σ(2h) style two-term KL.
    let o2 = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
    let (ht, hs) = (0.7f64, -0.2f64);
    let p = |h: f64| {
        let z = (h.exp(), (-h).exp());
        (z.0 / (z.0 + z.1), z.1 / (z.0 + z.1))
    };
    let (p1, p2) = p(ht);
    let (q1, q2) = p(hs);
    let want = p1 * (p1 / q1).ln() + p2 * (p2 / q2).ln();
    assert!((reference_kl(&[ht], &[hs], &o2).unwrap() - want).abs() < 1e-12);
    assert!(matches!(reference_kl(&h[..7], &h, &o), Err(Error::Dimension(_))));
}

#[test]
fn reference_kl_vanishes_as_student_approaches_teacher() {
    let mut rng = Rng::new(7);
    let o = rng.normal_tensor::<f64>(vec![32, 8], 1.0);
    let h_t: Vec<f64> = rng.normal_tensor::<f64>(vec![8], 1.0).into_data();
    let v: Vec<f64> = rng.normal_tensor::<f64>(vec![8], 1.0).into_data();
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut prev = f64::INFINITY;
    for eps in [1e-1, 1e-2, 1e-3] {
        let h_s: Vec<f64> = h_t.iter().zip(&v).map(|(a, b)| a + eps * b / vn).collect();
        let kl = reference_kl(&h_t, &h_s, &o).unwrap();
        assert!(kl < prev && kl >= 0.0);
        prev = kl;
    }
    assert!(prev < 1e-5);
}

#[test]
fn reference_kl_is_invariant_along_constant_logit_directions() {
    // O = [B | 1]: the last hidden coordinate adds the same value to every
    // logit, so moving h_t along e_last leaves the softmax unchanged.
    let mut rng = Rng::new(8);
    let (v, h) = (10, 5);
    let mut o = rng.normal_tensor::<f64>(vec![v, h], 1.0);
    for r in 0..v {
        o.row_mut(r)[h - 1] = 1.0;
    }
    let h_t: Vec<f64> = rng.normal_tensor::<f64>(vec![h], 1.0).into_data();
    let h_s: Vec<f64> = rng.normal_tensor::<f64>(vec![h], 1.0).into_data();
    let base = reference_kl(&h_t, &h_s, &o).unwrap();
    let mut shifted = h_t.clone();
    shifted[h - 1] += 3.7;
    assert!((reference_kl(&shifted, &h_s, &o).unwrap() - base).abs() < 1e-9);
    assert!(reference_kl(&shifted, &h_t, &o).unwrap() < 1e-9);
}

#[test]
fn small_distill_loss_implies_small_kl() {
    let mut rng = Rng::new(9);
    for _ in 0..200 {
        let o = rng.normal_tensor::<f64>(vec![64, 64], 1.0);
        let h_t: Vec<f64> = rng.normal_tensor::<f64>(vec![64], 1.0).into_data();
        let d: Vec<f64> = rng.normal_tensor::<f64>(vec![64], 1.0).into_data();
        let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let h_s: Vec<f64> = h_t.iter().zip(&d).map(|(a, b)| a + 0.9e-7 * b / dn).collect();
        assert!(distill_value(&h_s, &h_t).unwrap() <= 1e-7);
        assert!(reference_kl(&h_t, &h_s, &o).unwrap() <= 1e-6);
    }
}

struct Fixture {
    teacher: ToyLm,
    teacher_store: ParamStore<f32>,
    student: StudentModel,
    store: ParamStore<f32>,
    features: Vec<Tensor<f32>>,
    targets: Vec<TeacherTarget>,
}

fn fixture(mode: InitMode) -> Fixture {
    let mut rng = Rng::new(11);
    let mut teacher_store = ParamStore::new();
    let mut teacher = ToyLm::new(
        &mut teacher_store,
        "lm",
        LmSpec {
            vocab: 12,
            width: 8,
            layers: 1,
            heads: 2,
            ffn_hidden: 16,
            max_positions: 12,
        },
        &mut rng,
    )
    .unwrap();
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
    let donor = AsrModel::new(enc, dec, &mut rng).unwrap();
    let spec = QFormerSpec {
        n_queries: 4,
        width: 6,
        lm_width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
    };
    let (student, store) = StudentModel::from_donor(&donor, spec, mode, false, &mut rng).unwrap();
    let transcripts = [vec![4, 5], vec![7, 9, 10]];
    let features = (0..2).map(|i| rng.normal_tensor(vec![5 + i, 4], 1.0)).collect();
    let targets = transcripts
        .iter()
        .map(|t| teacher_target(&teacher, &teacher_store, t).unwrap())
        .collect();
    Fixture {
        teacher,
        teacher_store,
        student,
        store,
        features,
        targets,
    }
}

fn breakdown(fx: &Fixture, items: &[usize], cfg: &LossConfig) -> LossBreakdown {
    let mut g = Graph::new();
    let sp = fx.student.bind(&mut g, &fx.store);
    let tp = fx.teacher.bind(&mut g, &fx.teacher_store);
    let batch: Vec<BatchItem> = items
        .iter()
        .map(|&i| BatchItem {
            features: &fx.features[i],
            target: &fx.targets[i],
        })
        .collect();
    combined_step_loss(&mut g, &fx.student, &sp, &fx.teacher, &tp, &fx.teacher_store, &batch, cfg)
        .unwrap()
        .1
}

#[test]
fn combined_loss_arms_and_batch_mean() {
    let fx = fixture(InitMode::Decoder);
    let full = breakdown(&fx, &[0, 1], &LossConfig::default());
    assert!((full.combined - (full.l_distill + full.l_con)).abs() < 1e-5);
    assert!(full.l_con > 0.0 && full.l_distill > 0.0 && full.reference_kl >= 0.0);

    let zero = breakdown(
        &fx,
        &[0, 1],
        &LossConfig {
            lambda_con: 0.0,
            ..LossConfig::default()
        },
    );
    let distill_only = breakdown(
        &fx,
        &[0, 1],
        &LossConfig {
            arm: Arm::DistillOnly,
            ..LossConfig::default()
        },
    );
    assert_eq!(zero.combined, distill_only.combined);
    assert_eq!(distill_only.combined, distill_only.l_distill);
    assert_eq!(distill_only.lambda_con, 0.0);

    let align = breakdown(
        &fx,
        &[0, 1],
        &LossConfig {
            arm: Arm::AlignOnly,
            lambda_con: 2.0,
            ..LossConfig::default()
        },
    );
    assert!((align.combined - 2.0 * align.l_con).abs() < 1e-5);

    let a = breakdown(&fx, &[0], &LossConfig::default());
    let b = breakdown(&fx, &[1], &LossConfig::default());
    assert!((full.combined - 0.5 * (a.combined + b.combined)).abs() < 1e-6);
    assert!((full.reference_kl - 0.5 * (a.reference_kl + b.reference_kl)).abs() < 1e-7);
}

#[test]
fn exact_text_embeddings_give_zero_loss() {
    let fx = fixture(InitMode::Decoder);
    let target = &fx.targets[1];
    let mut g = Graph::new();
    let tp = fx.teacher.bind(&mut g, &fx.teacher_store);
    let text = g.constant(target.t_text.clone());
    let h = fx.teacher.forward_mixed(&mut g, &tp, &PROMPT_PREFIX, text, &PROMPT_SUFFIX).unwrap();
    let rows = g.value(h).rows();
    let h_s = g.slice_rows(h, rows - 1, 1).unwrap();
    let h_t = g.constant(target.h_t.clone());
    let l_dis = distill_loss(&mut g, h_s, h_t, false).unwrap();
    let pad = g.constant(Tensor::full(vec![1, 8], 0.5));
    let audio = g.concat_rows(&[pad, text]).unwrap();
    let l_con = token_alignment_loss(&mut g, audio, text, AlignOptions::default()).unwrap();
    let total = g.add(l_dis, l_con).unwrap();
    assert_eq!(g.value(total).data()[0], 0.0);
}

#[test]
fn gradient_reaches_student_but_not_teacher() {
    let fx = fixture(InitMode::Scratch);
    let mut g = Graph::new();
    let sp = fx.student.bind(&mut g, &fx.store);
    let tp = fx.teacher.bind(&mut g, &fx.teacher_store);
    let batch: Vec<BatchItem> = (0..2)
        .map(|i| BatchItem {
            features: &fx.features[i],
            target: &fx.targets[i],
        })
        .collect();
    let (loss, _) = combined_step_loss(
        &mut g,
        &fx.student,
        &sp,
        &fx.teacher,
        &tp,
        &fx.teacher_store,
        &batch,
        &LossConfig::default(),
    )
    .unwrap();
    g.backward(loss).unwrap();
    let queries = g.grad(sp[fx.student.adapter.queries]).unwrap();
    for q in 0..queries.rows() {
        assert!(queries.row(q).iter().any(|&x| x != 0.0), "query {q} has no gradient");
    }
    for (name, _) in fx.store.iter() {
        if name.starts_with(STUDENT_ENCODER) {
            let id = fx.store.id(name).unwrap();
            assert!(g.grad(sp[id]).unwrap().norm() > 0.0, "{name} has no gradient");
        }
    }
    for &v in tp.vars() {
        assert!(g.grad(v).is_none());
    }
}

#[test]
fn align_only_gradient_skips_the_teacher_path() {
    let fx = fixture(InitMode::Decoder);
    let mut g = Graph::new();
    let sp = fx.student.bind(&mut g, &fx.store);
    let tp = fx.teacher.bind(&mut g, &fx.teacher_store);
    let batch = [BatchItem {
        features: &fx.features[0],
        target: &fx.targets[0],
    }];
    let cfg = LossConfig {
        arm: Arm::AlignOnly,
        ..LossConfig::default()
    };
    let (loss, b) = combined_step_loss(&mut g, &fx.student, &sp, &fx.teacher, &tp, &fx.teacher_store, &batch, &cfg).unwrap();
    assert!(b.l_distill > 0.0);
    g.backward(loss).unwrap();

    let mut h = Graph::new();
    let sp2 = fx.student.bind(&mut h, &fx.store);
    let t_audio = fx.student.audio_tokens(&mut h, &sp2, &fx.features[0]).unwrap();
    let text = h.constant(fx.targets[0].t_text.clone());
    let alone = token_alignment_loss(&mut h, t_audio, text, AlignOptions::default()).unwrap();
    h.backward(alone).unwrap();
    for id in fx.store.ids() {
        assert_eq!(g.grad(sp[id]), h.grad(sp2[id]), "{}", fx.store.name(id));
    }
}

#[test]
fn combined_loss_passes_grad_check() {
    let fx = fixture(InitMode::Decoder);
    let store = fx.store.cast::<f64>();
    let teacher_store = fx.teacher_store.cast::<f64>();
    let proj = fx.student.adapter.projection.weight;
    let x = store.get(proj).clone();
    let report = grad_check(
        |g, v| {
            let sp = fx.student.bind(g, &store).with(proj, v);
            let tp = fx.teacher.bind(g, &teacher_store);
            let batch: Vec<BatchItem> = (0..2)
                .map(|i| BatchItem {
                    features: &fx.features[i],
                    target: &fx.targets[i],
                })
                .collect();
            let (loss, _) = combined_step_loss(g, &fx.student, &sp, &fx.teacher, &tp, &teacher_store, &batch, &LossConfig::default())?;
            Ok(loss)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
