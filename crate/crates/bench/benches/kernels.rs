use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedia_bench::{federation, network, volume};
use fedia_core::fed::{run_round, Aggregation, ClientState, TrainSettings};
use fedia_core::{count_components, label_components, Connectivity};
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let (net, params) = network(1);
    let vol = volume(2);
    let image = vol.image.plane(3);
    let target = vol.gt_mask.plane(3);
    c.bench_function("forward_32x32", |b| b.iter(|| net.forward(&params, black_box(&image)).unwrap()));
    c.bench_function("backward_32x32", |b| {
        b.iter(|| net.backward(&params, black_box(&image), &target, 1.0).unwrap())
    });
}

fn ccl(c: &mut Criterion) {
    let mask = volume(3).gt_mask;
    c.bench_function("label_8x32x32_face", |b| b.iter(|| label_components(black_box(&mask), Connectivity::Face)));
    c.bench_function("label_8x32x32_full", |b| b.iter(|| label_components(black_box(&mask), Connectivity::Full)));
    c.bench_function("count_min3", |b| b.iter(|| count_components(black_box(&mask), Connectivity::Face, 3)));
}

fn round(c: &mut Criterion) {
    let (net, global) = network(4);
    let data = federation(5);
    let settings = TrainSettings::default();
    let clients: Vec<ClientState> = data
        .clients
        .into_iter()
        .zip(data.completeness)
        .enumerate()
        .map(|(k, (v, a))| ClientState::new(k, v, a, &global, settings.learning_rate))
        .collect();
    let mut group = c.benchmark_group("federated");
    group.sample_size(10);
    group.bench_function("fedavg_round_k4", |b| {
        b.iter_batched(
            || clients.clone(),
            |mut cs| run_round(&net, &mut cs, &global, Aggregation::Quantity, &settings, 1, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, model, ccl, round);
criterion_main!(benches);
