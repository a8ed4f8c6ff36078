use criterion::{criterion_group, criterion_main, Criterion};
use gmsrf_core::data::synth::{generate_center, CenterSpec};
use gmsrf_core::engine::{train_step, TrainConfig};
use gmsrf_core::optim::AdamState;
use gmsrf_core::{Model, ModelConfig};
use std::hint::black_box;

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, config) in [("micro", ModelConfig::micro()), ("default", ModelConfig::default())] {
        let data = generate_center(&CenterSpec::preset_a(), 8, config.input_size).unwrap();
        let (images, masks) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig { model: config.clone(), ..TrainConfig::default() };
        let mut model = Model::<f32>::new(&config).unwrap();
        let mut adam = AdamState::new(&model.store);
        group.bench_function(format!("{name} batch 8"), |b| {
            b.iter(|| black_box(train_step(&mut model, &mut adam, &images, &masks, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let config = ModelConfig::default();
    let data = generate_center(&CenterSpec::preset_a(), 8, config.input_size).unwrap();
    let (images, masks) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut model = Model::<f32>::new(&config).unwrap();
    let cfg = TrainConfig::default();
    let mut adam = AdamState::new(&model.store);
    // Eval mode needs running statistics from at least one training step.
    train_step(&mut model, &mut adam, &images, &masks, &cfg).unwrap();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    group.bench_function("default batch 8", |b| b.iter(|| black_box(model.predict(&images).unwrap())));
    group.finish();
}

criterion_group!(benches, step, inference);
criterion_main!(benches);
