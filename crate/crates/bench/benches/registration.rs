//! Hot-path benchmarks: linear-system assembly, closed-form solves, the
//! weighting network, the training gradient and a full multi-level
//! registration.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ppcreg_bench::fixture;
use ppcreg_core::{
    backward, build_features, build_system, forward_cached, grad_objective, register_case,
    simulate_correspondences, solve_mccr, solve_weighted, variant_config, CaseRecord,
    CorrSimConfig, MccrConfig, NetworkParams, TrainingSample, Weights,
};
use std::hint::black_box;

fn bench_simulate(c: &mut Criterion) {
    let fx = fixture(512).expect("fixture");
    let sim = CorrSimConfig {
        max_points: Some(512),
        seed: 5,
        ..CorrSimConfig::default()
    };
    c.bench_function("simulate_512", |b| {
        b.iter(|| {
            simulate_correspondences(
                black_box(&fx.phantom),
                &fx.camera,
                &fx.start,
                &fx.truth,
                &sim,
            )
            .unwrap()
        })
    });
}

fn bench_solves(c: &mut Criterion) {
    let fx = fixture(1024).expect("fixture");
    let sys = build_system(&fx.set).expect("system");
    let n = fx.set.items().len();
    let weights = Weights::uniform(n);

    c.bench_function("build_system_1024", |b| {
        b.iter(|| build_system(black_box(&fx.set)).unwrap())
    });
    c.bench_function("solve_weighted_1024", |b| {
        b.iter(|| solve_weighted(black_box(&sys), &weights, 0.01).unwrap())
    });
    c.bench_function("solve_mccr_1024", |b| {
        let cfg = MccrConfig::default();
        b.iter(|| solve_mccr(black_box(&sys), &weights, &cfg).unwrap())
    });
}

fn bench_network(c: &mut Criterion) {
    let fx = fixture(1024).expect("fixture");
    let feats = build_features(&fx.set, 30.0).expect("features");
    let params = NetworkParams::init(3);

    c.bench_function("network_forward_1024", |b| {
        b.iter(|| forward_cached(black_box(&params), &feats).unwrap())
    });
    c.bench_function("network_backward_1024", |b| {
        let (_, cache) = forward_cached(&params, &feats).unwrap();
        let upstream = vec![1e-3; feats.len()];
        b.iter(|| backward(black_box(&params), &cache, &upstream).unwrap())
    });
}

fn bench_training_gradient(c: &mut Criterion) {
    let fx = fixture(256).expect("fixture");
    let sample = TrainingSample {
        set: fx.set.clone(),
        camera: fx.camera.clone(),
        start: fx.start,
        truth: fx.truth,
        corners: fx.phantom.voi_corners(),
        level: 0,
        feature_scale: 30.0,
    };
    let params = NetworkParams::init(3);
    c.bench_function("grad_objective_256", |b| {
        b.iter(|| grad_objective(black_box(&params), &sample, 0.01).unwrap())
    });
}

fn bench_register(c: &mut Criterion) {
    let fx = fixture(1024).expect("fixture");
    let variant = variant_config("PPC-R").expect("variant");
    let sim = CorrSimConfig {
        max_points: Some(256),
        seed: 5,
        ..CorrSimConfig::default()
    };
    c.bench_function("register_case_ppc_r", |b| {
        b.iter_batched(
            || CaseRecord {
                phantom: &fx.phantom,
                camera: fx.camera.clone(),
                truth: fx.truth,
                start: fx.start,
                sim: sim.clone(),
                seed: 17,
            },
            |case| register_case(black_box(&case), &variant, &[]).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_simulate,
    bench_solves,
    bench_network,
    bench_training_gradient,
    bench_register
);
criterion_main!(benches);
