use super::*;
use crate::error::Error;
use crate::nnblocks::ParamStore;
use crate::numcore::{conv1d, gelu, grad_check, Graph, Rng, Tensor};

fn spec(noise: f64, pitch: (f64, f64)) -> SynthSpec {
    let tokens: Vec<usize> = (4..64).collect();
    SynthSpec::for_tokens(&tokens, 16, 16_000, 40.0, 0.4, noise, pitch).unwrap()
}

#[test]
fn empty_tokens_give_empty_waveform() {
    let s = spec(0.01, (0.9, 1.1));
    let w = synth_utterance(&[], &s, &mut Rng::new(0)).unwrap();
    assert!(w.is_empty());
}

#[test]
fn unknown_token_is_named() {
    let s = spec(0.0, (1.0, 1.0));
    let err = synth_utterance(&[5, 99], &s, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("99")), "{err}");
}

#[test]
fn synthesis_is_deterministic() {
    let s = spec(0.05, (0.9, 1.1));
    let a = synth_utterance(&[4, 9, 33], &s, &mut Rng::new(12)).unwrap();
    let b = synth_utterance(&[4, 9, 33], &s, &mut Rng::new(12)).unwrap();
    let c = synth_utterance(&[4, 9, 33], &s, &mut Rng::new(13)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.samples.iter().all(|x| x.abs() <= 1.0));
}

#[test]
fn pure_chord_has_dft_peaks_at_mapped_frequencies() {
    let s = spec(0.0, (1.0, 1.0));
    for tok in [4, 20, 63] {
        let w = synth_utterance(&[tok], &s, &mut Rng::new(0)).unwrap();
        let n = w.len();
        // direct DFT magnitude on a fine 5 Hz grid
        let mag = |f: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in w.samples.iter().enumerate() {
                let ph = 2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0;
                re += x as f64 * ph.cos();
                im -= x as f64 * ph.sin();
            }
            (re * re + im * im).sqrt() / n as f64
        };
        let grid: Vec<(f64, f64)> = (1..1600).map(|k| k as f64 * 5.0).map(|f| (f, mag(f))).collect();
        let mut peaks: Vec<(f64, f64)> = grid
            .windows(3)
            .filter(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1)
            .map(|w| w[1])
            .collect();
        peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut top: Vec<f64> = peaks[..2].iter().map(|p| p.0).collect();
        top.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (f1, f2) = s.chord(tok).unwrap();
        assert!((top[0] - f1).abs() <= 5.0, "{top:?} vs {f1}");
        assert!((top[1] - f2).abs() <= 5.0, "{top:?} vs {f2}");
    }
}

#[test]
fn default_tokens_are_distinguishable() {
    let s = spec(0.0, (1.0, 1.0));
    let sep = s.min_pairwise_separation(400, 160, 16).unwrap();
    assert!(sep > 1.0, "separation {sep}");
}

#[test]
fn too_few_mels_for_vocab_is_config_error() {
    let tokens: Vec<usize> = (0..64).collect();
    let r = SynthSpec::for_tokens(&tokens, 4, 16_000, 40.0, 0.4, 0.0, (1.0, 1.0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn silence_hits_the_floor() {
    let w = Waveform::new(vec![0.0; 1000], 16_000).unwrap();
    let mel = mel_spectrogram(&w, 400, 160, 16).unwrap();
    let floor = (ENERGY_FLOOR.ln()) as f32;
    assert!(mel.values.data().iter().all(|&v| v == floor));
}

#[test]
fn frame_count_formula() {
    assert_eq!(frame_count(16_000, 400, 160), Some(98));
    let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
    assert_eq!(mel_spectrogram(&w, 400, 160, 16).unwrap().frames(), 98);
    let short = Waveform::new(vec![0.0; 399], 16_000).unwrap();
    assert!(matches!(mel_spectrogram(&short, 400, 160, 16), Err(Error::Data(_))));
}

#[test]
fn sine_at_center_peaks_in_that_filter() {
    let centers = mel_centers(16, 16_000);
    for m in [3, 8, 14] {
        let f = centers[m];
        let samples: Vec<f32> = (0..4000)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        let mel = mel_spectrogram(&Waveform::new(samples, 16_000).unwrap(), 400, 160, 16).unwrap();
        for fr in 0..mel.frames() {
            let row = mel.values.row(fr);
            let arg = (0..16).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, m, "frame {fr}");
        }
    }
}

#[test]
fn mel_is_hop_translation_covariant() {
    let s = spec(0.02, (0.9, 1.1));
    let w = synth_utterance(&[7, 12, 40, 41], &s, &mut Rng::new(3)).unwrap();
    let mut shifted = vec![0.0f32; 160];
    shifted.extend_from_slice(&w.samples);
    let a = mel_spectrogram(&w, 400, 160, 16).unwrap();
    let b = mel_spectrogram(&Waveform::new(shifted, 16_000).unwrap(), 400, 160, 16).unwrap();
    assert_eq!(b.frames(), a.frames() + 1);
    for f in 0..a.frames() {
        for (x, y) in a.values.row(f).iter().zip(b.values.row(f + 1)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let s = spec(0.01, (0.9, 1.1));
    let w = synth_utterance(&[4, 5], &s, &mut Rng::new(1)).unwrap();
    write_wav(&path, &w).unwrap();
    let r = read_wav(&path).unwrap();
    assert_eq!(r.sample_rate, 16_000);
    assert_eq!(r.len(), w.len());
    for (a, b) in r.samples.iter().zip(&w.samples) {
        assert!((a - b).abs() <= 1.0 / 32767.0 + 1e-6);
    }
}

fn small_encoder<T: crate::numcore::Real>(store: &mut ParamStore<T>, rng: &mut Rng) -> AudioEncoder {
    let spec = EncoderSpec {
        n_mels: 16,
        width: 8,
        layers: 2,
        heads: 2,
        ffn_hidden: 16,
    };
    AudioEncoder::new(store, "enc", spec, rng).unwrap()
}

#[test]
fn stem_length_and_zero_input() {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(vec![10, 16]));
    let y = enc.conv_stem(&mut g, &p, x).unwrap();
    assert_eq!(g.value(y).shape(), &[5, 8]);
    let pos = crate::nnblocks::sinusoidal_positions::<f64>(5, 8).unwrap();
    assert_eq!(g.value(y), &pos);
    assert_eq!(AudioEncoder::output_len(10), 5);
    assert_eq!(AudioEncoder::output_len(7), 4);

    let bad = g.constant(Tensor::zeros(vec![10, 12]));
    assert!(matches!(enc.conv_stem(&mut g, &p, bad), Err(Error::Dimension(_))));
}

#[test]
fn stem_matches_sliding_window_composition() {
    let mut rng = Rng::new(6);
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, &mut rng);
    for id in [enc.conv1_bias, enc.conv2_bias] {
        let n = store.get(id).len();
        store.set(id, rng.normal_tensor(vec![n], 0.3)).unwrap();
    }
    let x = rng.normal_tensor::<f64>(vec![6, 16], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = enc.conv_stem(&mut g, &p, xv).unwrap();

    let bias_rows = |t: Tensor<f64>, b: &Tensor<f64>| {
        let mut t = t;
        for r in 0..t.rows() {
            for (v, &bb) in t.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        t
    };
    let h = gelu(&bias_rows(conv1d(&x, store.get(enc.conv1), 1, 1).unwrap(), store.get(enc.conv1_bias)));
    let h = gelu(&bias_rows(conv1d(&h, store.get(enc.conv2), 2, 1).unwrap(), store.get(enc.conv2_bias)));
    let pos = crate::nnblocks::sinusoidal_positions::<f64>(3, 8).unwrap();
    let expect = h.zip_map(&pos, |a, b| a + b).unwrap();
    assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn encode_audio_shape_and_determinism() {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::<f32>::new();
    let enc = small_encoder(&mut store, &mut rng);
    let s = spec(0.01, (0.9, 1.1));
    for n in 1..5 {
        let toks: Vec<usize> = (0..n).map(|i| 4 + i).collect();
        let w = synth_utterance(&toks, &s, &mut Rng::new(n as u64)).unwrap();
        let a = encode_audio(&w, &enc, &store, 400, 160).unwrap();
        let frames = frame_count(w.len(), 400, 160).unwrap();
        assert_eq!(a.shape(), &[AudioEncoder::output_len(frames), 8]);
        assert_eq!(a, encode_audio(&w, &enc, &store, 400, 160).unwrap());
    }
}

#[test]
fn encoder_stem_weights_pass_grad_check() {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, &mut rng);
    let s = spec(0.01, (0.9, 1.1));
    // 0.1 s clip
    let w = synth_utterance(&[10, 11, 12], &s, &mut rng).unwrap();
    let w = Waveform::new(w.samples[..1600].to_vec(), 16_000).unwrap();
    let feats = normalize_log_mel(&mel_spectrogram(&w, 400, 160, 16).unwrap()).cast::<f64>();
    let probe = rng.normal_tensor::<f64>(vec![4, 8], 1.0);
    let conv1 = store.get(enc.conv1).clone();
    let r = grad_check(
        |g, k| {
            let p = store.bind(g, false).with(enc.conv1, k);
            let x = g.constant(feats.clone());
            let a = enc.forward(g, &p, x)?;
            let pv = g.constant(probe.clone());
            let y = g.mul(a, pv)?;
            Ok(g.sum(y))
        },
        &conv1,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
