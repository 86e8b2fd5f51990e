//! Trains the desk-scale model on synthetic nominal data and prints the
//! per-epoch loss. Sizes can be overridden through environment variables:
//! `EPOCHS`, `BATCH`, `D_MODEL`, `D_LATENT`, `BLOCKS`, `EPISODES`, `LR`.

use std::env;

use rapt_core::model::ModelConfig;
use rapt_core::synth::{generate_nominal, WorldConfig};
use rapt_core::train::{init_model, train_with, TrainConfig};

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
    let model = init_model(&data, model_cfg, 0)?;
    println!("parameters: {}", model.param_count());
    let (_, report) = train_with(model, &data, &cfg, |s| {
        println!(
            "epoch {:>3}  train {:>9.4}  heldout {:>9.4}  lr {:.2e}  {:.1}s",
            s.epoch + 1,
            s.train_nll,
            s.heldout_nll.unwrap_or(f64::NAN),
            s.lr,
            s.seconds
        );
    })?;
    println!(
        "steps/epoch {}  wall clock {:.1}s",
        report.steps_per_epoch, report.wall_clock_seconds
    );
    Ok(())
}
