//! Sequential vs rayon-parallel execution of the three data-parallel paths:
//! training (batch chunks), benchmark scoring (episodes) and integrated
//! gradients (path points).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rapt_core::detect::{calibrate, CalibrationConfig};
use rapt_core::model::{ModelConfig, RaptModel};
use rapt_core::saliency::{saliency_at, SaliencyConfig};
use rapt_core::synth::{generate_nominal, run_benchmark, BenchConfig, FaultSuite, World, WorldConfig};
use rapt_core::train::{init_model, train, TrainConfig};
use rapt_core::{ExecMode, TrajectoryLog};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn setup() -> (WorldConfig, Vec<TrajectoryLog>, RaptModel) {
    let world = WorldConfig {
        d_joints: 4,
        episode_len: 300,
        ..WorldConfig::default()
    };
    let data = generate_nominal(&world, 16).unwrap();
    let cfg = ModelConfig {
        d_obs: world.d_obs(),
        d_model: 32,
        n_blocks: 2,
        d_latent: 16,
        ..ModelConfig::default()
    };
    let model = init_model(&data, cfg, 0).unwrap();
    (world, data, model)
}

fn bench(c: &mut Criterion) {
    let (world, data, model) = setup();

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for exec in MODES {
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 64,
            unroll: 25,
            holdout_fraction: 0.0,
            exec,
            ..TrainConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &tc, |b, tc| {
            b.iter(|| black_box(train(model.clone(), &data, tc).unwrap()))
        });
    }
    g.finish();

    let cal = World::new(world.clone()).unwrap().episode(500_000).log;
    let inf = model.inference::<f32>();
    let profile = calibrate(&inf, &cal, &data, &CalibrationConfig::default()).unwrap();
    let mut g = c.benchmark_group("benchmark_scoring");
    g.sample_size(10);
    for exec in MODES {
        let bc = BenchConfig {
            n_nominal: 16,
            n_faulted: 16,
            exec,
            ..BenchConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &bc, |b, bc| {
            b.iter(|| black_box(run_benchmark(&inf, &profile, &world, &FaultSuite::default(), bc).unwrap()))
        });
    }
    g.finish();

    let log = &data[0];
    let mut g = c.benchmark_group("integrated_gradients");
    g.sample_size(10);
    for exec in MODES {
        let sc = SaliencyConfig {
            window: 100,
            chunk_rows: 8,
            exec,
            ..SaliencyConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &sc, |b, sc| {
            b.iter(|| black_box(saliency_at(&model, log, 250, sc).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
