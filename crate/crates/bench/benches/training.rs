use beef_core::synthworld::{generate, WorldConfig};
use beef_core::trainer::{evaluate, TrainConfig, TrainLog, Trainer};
use criterion::{criterion_group, criterion_main, Criterion};

fn step(c: &mut Criterion) {
    let data = generate(&WorldConfig {
        episodes: 40,
        ..WorldConfig::tiny()
    })
    .unwrap();
    let samples = data.samples("train").unwrap();
    let mut t = Trainer::new(TrainConfig::preset("tiny").unwrap()).unwrap();
    let mut log = TrainLog::default();
    c.bench_function("train_step_tiny_batch8", |b| b.iter(|| t.step(&data, &samples, &mut log).unwrap()));
    c.bench_function("evaluate_tiny_test_split", |b| {
        b.iter(|| evaluate(t.model(), t.store(), &data, "test").unwrap())
    });
}

fn world(c: &mut Criterion) {
    let cfg = WorldConfig {
        episodes: 20,
        ..WorldConfig::default()
    };
    c.bench_function("generate_20_episodes_32px", |b| b.iter(|| generate(&cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = step, world
}
criterion_main!(benches);
