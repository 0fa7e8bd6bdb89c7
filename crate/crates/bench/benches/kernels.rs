use candle_core::DType;
use criterion::{criterion_group, criterion_main, Criterion};
use foodspace_bench::{random_rows, random_rows_f64};
use foodspace_core::gan::{GanConfig, GanModel};
use foodspace_core::metrics::{frechet_distance, inception_score, ClassProbabilities, FeatureBatch, FeatureSource};
use foodspace_core::retrieval::{evaluate_retrieval, Direction};
use foodspace_core::vocab::normalize_ingredient;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn retrieval(c: &mut Criterion) {
    let p = random_rows(1000, 128, 1);
    let q = random_rows(1000, 128, 2);
    c.bench_function("retrieval pool 100 x 10", |b| {
        b.iter(|| evaluate_retrieval(&p, &q, 100, 10, Direction::Im2Recipe, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
    });
}

fn frechet(c: &mut Criterion) {
    let real = FeatureBatch::new(&random_rows_f64(900, 64, 3), FeatureSource::Real).unwrap();
    let fake = FeatureBatch::new(&random_rows_f64(900, 64, 4), FeatureSource::Generated).unwrap();
    c.bench_function("frechet 900 x 64", |b| b.iter(|| frechet_distance(&real, &fake).unwrap()));
}

fn inception(c: &mut Criterion) {
    let rows: Vec<Vec<f64>> = random_rows_f64(900, 25, 5)
        .into_iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let probs = ClassProbabilities::new(&rows).unwrap();
    c.bench_function("inception score 900 x 25", |b| b.iter(|| inception_score(&probs, 10).unwrap()));
}

fn generator(c: &mut Criterion) {
    let gan = GanModel::new(
        GanConfig {
            foodspace_dim: 128,
            ..GanConfig::desk()
        },
        DType::F32,
    )
    .unwrap();
    let p = random_rows(1, 128, 6).remove(0);
    let z = gan.sample_noise(&mut ChaCha8Rng::seed_from_u64(7));
    c.bench_function("generate one 64x64", |b| b.iter(|| gan.generate_one(&p, &z).unwrap()));
}

fn normalize(c: &mut Criterion) {
    let raw = ["Tomatoes ", "fresh-ground black pepper", "Extra-Virgin Olive Oil", "2 cups chopped onions"];
    c.bench_function("normalize ingredient", |b| {
        b.iter(|| raw.iter().map(|r| normalize_ingredient(r).unwrap()).count())
    });
}

criterion_group!(benches, retrieval, frechet, inception, generator, normalize);
criterion_main!(benches);
