use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use osic_core::data::{synth_dataset, Split};
use osic_core::ddr::SpatialBlock;
use osic_core::decoder::{beam_search, greedy_decode};
use osic_core::metrics::score_corpus;
use osic_core::model::{Captioner, ModelConfig, ModelSpec};
use osic_core::training::prepare_items;
use osic_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 256] {
        let a = random(&mut rng, n, n);
        let b = random(&mut rng, n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn spatial_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("spatial_attention");
    for n in [16, 64] {
        let mut store = ParamStore::<f32>::new();
        let block = SpatialBlock::new(&mut store, "sp", n, 64, 2, &mut rng).unwrap();
        let x = random(&mut rng, n, 64);
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new(&store);
                let xn = g.constant(x.clone()).unwrap();
                let (y, _) = block.forward(&mut g, xn).unwrap();
                black_box(g.value(y).len())
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new(&store);
                let xn = g.constant(x.clone()).unwrap();
                let (y, _) = block.forward(&mut g, xn).unwrap();
                let loss = g.sum_all(y).unwrap();
                black_box(g.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let data = synth_dataset(42, 4, 8).unwrap();
    let items = prepare_items(&data.dataset, Split::Train, &data.vocab, 16).unwrap();
    let spec = ModelSpec {
        config: ModelConfig::default(),
        levels: items[0].features.shapes(),
        vocab_size: data.vocab.len(),
    };
    let mut store = ParamStore::<f32>::new();
    let model = Captioner::new(&mut store, &spec, 42).unwrap();
    let features = &items[0].features;
    let mut group = c.benchmark_group("decode");
    group.bench_function("encode", |b| b.iter(|| black_box(model.memory(&store, features).unwrap())));
    let memory = model.memory(&store, features).unwrap();
    group.bench_function("greedy", |b| {
        b.iter(|| {
            let step = model.stepper(&store, memory.clone());
            black_box(greedy_decode(&step, model.max_len()).unwrap())
        })
    });
    for beam in [2, 4] {
        group.bench_with_input(BenchmarkId::new("beam", beam), &beam, |b, &k| {
            b.iter(|| {
                let step = model.stepper(&store, memory.clone());
                black_box(beam_search(&step, k, model.max_len()).unwrap())
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.random_range(6..14);
        (0..n).map(|_| words[rng.random_range(0..words.len())].clone()).collect()
    };
    let cands: Vec<Vec<String>> = (0..500).map(|_| sentence(&mut rng)).collect();
    let refs: Vec<Vec<Vec<String>>> = (0..500).map(|_| (0..5).map(|_| sentence(&mut rng)).collect()).collect();
    c.bench_function("score_corpus_500x5", |b| b.iter(|| black_box(score_corpus(&cands, &refs).unwrap())));
}

criterion_group!(benches, matmul, spatial_attention, decode, metrics);
criterion_main!(benches);
