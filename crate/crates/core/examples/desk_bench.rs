//! End-to-end desk benchmark: train, calibrate, inject faults, report.
//! Same environment overrides as `desk_train`, plus `SUITE=gross|full`.

use std::env;

use rapt_core::detect::{calibrate, CalibrationConfig};
use rapt_core::model::ModelConfig;
use rapt_core::synth::{generate_nominal, run_benchmark, BenchConfig, FaultSuite, World, WorldConfig};
use rapt_core::train::{init_model, train, TrainConfig};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> rapt_core::Result<()> {
    let world = WorldConfig::default();
    let data = generate_nominal(&world, var("EPISODES", 200))?;
    let model_cfg = ModelConfig {
        d_obs: world.d_obs(),
        d_model: var("D_MODEL", 64),
        d_latent: var("D_LATENT", 48),
        n_blocks: var("BLOCKS", 2),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: var("EPOCHS", 20),
        batch_size: var("BATCH", 256),
        peak_lr: var("LR", 1e-3),
        ..TrainConfig::default()
    };
    let (model, report) = train(init_model(&data, model_cfg, 0)?, &data, &cfg)?;
    println!("final train nll {:.4} ({:.0}s)", report.train_nll.last().unwrap(), report.wall_clock_seconds);

    let cal_world = World::new(WorldConfig { episode_len: 1500, ..world.clone() })?;
    let cal = cal_world.episode(500_000).log;
    let inf = model.inference::<f32>();
    let profile = calibrate(&inf, &cal, &data, &CalibrationConfig::default())?;
    let suite = match env::var("SUITE").as_deref() {
        Ok("gross") => FaultSuite::gross(),
        _ => FaultSuite::default(),
    };
    let r = run_benchmark(&inf, &profile, &world, &suite, &BenchConfig::default())?;
    for m in r.methods.iter().chain(&r.single_channel) {
        println!("{:?}: auroc {:?} tpr {:?}", m.method, m.auroc, m.tpr_at_fpr);
    }
    for k in &r.per_kind {
        println!("{}: auroc {:?} tpr {:?} flagged {:.2}", k.kind, k.auroc, k.tpr_at_fpr, k.flagged_rate);
    }
    println!("mean kind auroc {:?}  counts {:?}  delay {:?}", r.mean_kind_auroc, r.counts, r.delay);
    Ok(())
}
