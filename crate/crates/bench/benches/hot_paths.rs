use std::hint::black_box;

use cdcl_core::eval::{kbet, knn_accuracy, EmbeddingTable, KbetConfig, KnnConfig, RowMeta};
use cdcl_core::ssl::{ArchConfig, MethodLabel, RunState, StudentTeacher, TrainConfig, Trainer};
use cdcl_core::synth::{generate_dataset, split_by_batch, GeneratorConfig};
use cdcl_core::tensor::matmul;
use cdcl_core::views::{AugmentConfig, DatasetIndex};
use cdcl_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[256, 768], &mut rng);
    let b = random(&[768, 128], &mut rng);
    c.bench_function("matmul 256x768x128", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)))
    });
}

fn table(n: usize, dim: usize) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = (0..n)
        .map(|i| RowMeta {
            sample_id: i as u64,
            batch_id: (i % 6) as u32,
            treatment_id: (i % 20) as u32,
            is_control: i % 20 < 4,
            moa_id: (i % 16) as u32,
        })
        .collect();
    EmbeddingTable::new(rows, random(&[n, dim], &mut rng)).unwrap()
}

fn bench_metrics(c: &mut Criterion) {
    let t = table(600, 64);
    let cfg = KbetConfig {
        k_fraction: 0.05,
        ..KbetConfig::default()
    };
    c.bench_function("kbet 600x64", |b| b.iter(|| kbet(black_box(&t), &cfg).unwrap()));
    let (train, test) = (t.filter(|r| r.batch_id < 4), t.filter(|r| r.batch_id >= 4));
    c.bench_function("knn 400x200", |b| {
        b.iter(|| knn_accuracy(black_box(&train), black_box(&test), KnnConfig::default()).unwrap())
    });
}

fn bench_generate(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    let mut group = c.benchmark_group("synth");
    group.sample_size(10);
    group.bench_function("generate default dataset", |b| {
        b.iter(|| generate_dataset(black_box(&cfg)).unwrap())
    });
    group.finish();
}

fn bench_train_steps(c: &mut Criterion) {
    let gen = GeneratorConfig::default();
    let (m, samples) = generate_dataset(&gen).unwrap();
    let m = split_by_batch(&m, 4, 1, 1, 0).unwrap();
    let aug = AugmentConfig::default();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    for method in [
        MethodLabel::SslDino,
        MethodLabel::Cdcl,
        MethodLabel::SslByol,
        MethodLabel::Supervised,
    ] {
        let mut loss = method.loss_config();
        if loss.n_local_crops > 0 {
            loss.n_local_crops = 2;
        }
        let arch = ArchConfig::new(aug.view_len(gen.channels), gen.n_treatments);
        group.bench_function(format!("{method} 10 steps"), |b| {
            b.iter(|| {
                let tc = TrainConfig::new(10, 32, 0);
                let model = StudentTeacher::init(&arch, loss.method, 0).unwrap();
                let state = RunState::new(&model, &loss, &tc).unwrap();
                let index = DatasetIndex::training(&m, &samples);
                let mut t = Trainer::new(model, state, loss, tc, aug.clone(), index).unwrap();
                t.run_until(10, |_| {}).unwrap();
                t.state.iteration
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_metrics, bench_generate, bench_train_steps);
criterion_main!(benches);
