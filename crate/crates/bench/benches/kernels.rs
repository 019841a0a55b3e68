use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use crossdistill::audiofront::{mel_spectrogram, synth_utterance, SynthSpec};
use crossdistill::evalkit::paired_bootstrap;
use crossdistill::nnblocks::{build_stack, run_stack, LayerSpec, ParamStore};
use crossdistill::numcore::{matmul, Graph, Rng};
use crossdistill::toylab::{run_toy, ToyRunConfig};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let mut rng = Rng::new(0);
        let a = rng.normal_tensor::<f32>(vec![n, n], 1.0);
        let b = rng.normal_tensor::<f32>(vec![n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_attention_stack(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f32>::new();
    let spec = LayerSpec {
        width: 64,
        heads: 4,
        ffn_hidden: 128,
        causal: true,
        cross: false,
    };
    let layers = build_stack(&mut store, "stack", 2, spec, &mut rng).unwrap();
    let x = rng.normal_tensor::<f32>(vec![32, 64], 1.0);
    c.bench_function("attention_stack_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let v = g.constant(x.clone());
            let y = run_stack(&layers, &mut g, &p, v, None).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
        })
    });
}

fn bench_mel(c: &mut Criterion) {
    let tokens: Vec<usize> = (4..64).collect();
    let spec = SynthSpec::for_tokens(&tokens, 64, 16_000, 40.0, 0.5, 0.01, (0.9, 1.1)).unwrap();
    let wave = synth_utterance(&[4, 9, 17, 33, 60, 12, 8, 5], &spec, &mut Rng::new(2)).unwrap();
    c.bench_function("mel_spectrogram_8_tokens", |bench| {
        bench.iter(|| mel_spectrogram(black_box(&wave), 400, 160, 16).unwrap())
    });
}

fn bench_toylab(c: &mut Criterion) {
    let cfg = ToyRunConfig {
        dim: 64,
        vocab: 4096,
        steps: 20,
        runs: 4,
        ..ToyRunConfig::default()
    };
    c.bench_function("toylab_run_d64_v4096", |bench| bench.iter(|| run_toy(black_box(&cfg)).unwrap()));
}

fn bench_bootstrap(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let a: Vec<f64> = (0..500).map(|_| (rng.uniform() < 0.6) as u8 as f64).collect();
    let b: Vec<f64> = (0..500).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
    c.bench_function("paired_bootstrap_n500_b2000", |bench| {
        bench.iter(|| paired_bootstrap(black_box(&a), black_box(&b), 2000, 0).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_attention_stack, bench_mel, bench_toylab, bench_bootstrap);
criterion_main!(benches);
