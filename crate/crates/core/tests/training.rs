mod common;

use std::f64::consts::PI;

use rapt_core::model::{ModelConfig, Normalizer, RaptModel};
use rapt_core::synth::{generate_nominal, WorldConfig};
use rapt_core::train::{init_model, train, TrainConfig};
use rapt_core::{ExecMode, RaptError, TrajectoryLog};

fn small_world() -> WorldConfig {
    WorldConfig {
        d_joints: 2,
        episode_len: 120,
        ..WorldConfig::default()
    }
}

fn small_model(d_obs: usize) -> ModelConfig {
    ModelConfig {
        d_obs,
        d_model: 16,
        n_blocks: 1,
        d_latent: 8,
        ..ModelConfig::default()
    }
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        unroll: 10,
        peak_lr: 5e-3,
        seed: 42,
        ..TrainConfig::default()
    }
}

/// Independent one-cycle oracle: cosine ramp up over the first
/// `round(0.3 * (n - 1))` steps, cosine anneal over the rest.
fn schedule_oracle(step: usize, n: usize, peak: f64) -> f64 {
    let (lo, hi, end) = (peak / 25.0, peak, peak / 1e4);
    let w = ((0.3 * (n - 1) as f64).round() as usize).clamp(1, n - 2);
    if step <= w {
        let p = step as f64 / w as f64;
        hi + (lo - hi) * 0.5 * (1.0 + (PI * p).cos())
    } else {
        let p = (step - w) as f64 / (n - 1 - w) as f64;
        end + (hi - end) * 0.5 * (1.0 + (PI * p).cos())
    }
}

#[test]
fn same_seed_is_bit_identical_and_exec_mode_does_not_matter() {
    let data = generate_nominal(&small_world(), 12).unwrap();
    let model = init_model(&data, small_model(6), 1).unwrap();
    let cfg = small_train(2);
    let (m1, r1) = train(model.clone(), &data, &cfg).unwrap();
    let (m2, r2) = train(model.clone(), &data, &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1.heldout_nll, r2.heldout_nll);
    let seq = TrainConfig {
        exec: ExecMode::Sequential,
        ..cfg
    };
    let (m3, r3) = train(model, &data, &seq).unwrap();
    assert_eq!(m1, m3);
    assert_eq!(r1.train_nll, r3.train_nll);
}

#[test]
fn report_traces_match_schedule_and_clip_bound() {
    let data = generate_nominal(&small_world(), 10).unwrap();
    let model = init_model(&data, small_model(6), 2).unwrap();
    let cfg = TrainConfig {
        grad_clip_norm: 0.05,
        ..small_train(3)
    };
    let (_, rep) = train(model, &data, &cfg).unwrap();
    let n = rep.step_lr.len();
    assert_eq!(n, rep.steps_per_epoch * 3);
    for (s, &lr) in rep.step_lr.iter().enumerate() {
        let want = schedule_oracle(s, n, cfg.peak_lr);
        assert!((lr - want).abs() <= 1e-15 * want.max(1e-3), "step {s}: {lr} vs {want}");
    }
    assert!((rep.step_lr[n - 1] - cfg.peak_lr / 1e4).abs() < 1e-9);
    assert_eq!(rep.train_nll.len(), 3);
    assert_eq!(rep.heldout_nll.len(), 3);
    assert_eq!(rep.epoch_lr.len(), 3);
    assert_eq!(rep.epoch_seconds.len(), 3);
    assert!(rep.max_clipped_grad_norm <= 0.05 + 1e-9);
    assert!(rep.max_clipped_grad_norm > 0.0);
}

#[test]
fn constant_trajectories_drive_variance_to_the_floor() {
    let mut logs = Vec::new();
    for _ in 0..8 {
        let mut log = TrajectoryLog::new(2, 0);
        for t in 0..200 {
            log.push(t as f64, &[0.5, -1.0], None).unwrap();
        }
        logs.push(log);
    }
    let cfg = ModelConfig {
        noise_sigma: 0.0,
        ..small_model(2)
    };
    let model = init_model(&logs, cfg, 3).unwrap();
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 8,
        unroll: 10,
        peak_lr: 3e-2,
        holdout_fraction: 0.0,
        ..TrainConfig::default()
    };
    let (_, rep) = train(model, &logs, &tc).unwrap();
    // NLL at logvar = -10 with zero residual.
    let floor = 0.5 * ((2.0 * PI).ln() - 10.0);
    let last = *rep.train_nll.last().unwrap();
    assert!(last >= floor - 1e-9, "{last} below floor {floor}");
    assert!(last < floor + 0.5, "final NLL {last} not near floor {floor}");
    // 5-epoch moving average decreases after warm-up.
    let warm = (0.3 * tc.epochs as f64).ceil() as usize;
    let smooth: Vec<f64> = rep.train_nll.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in smooth[warm..].windows(2) {
        assert!(w[1] <= w[0] + 1e-4, "smoothed loss rose: {w:?}");
    }
}

#[test]
fn synthetic_training_halves_nll_and_generalizes() {
    let data = generate_nominal(&small_world(), 20).unwrap();
    let model = init_model(&data, small_model(6), 4).unwrap();
    let (_, rep) = train(model, &data, &small_train(12)).unwrap();
    let (first, last) = (rep.train_nll[0], *rep.train_nll.last().unwrap());
    assert!(last <= 0.5 * first || last < first - 0.5 * first.abs(), "{first} -> {last}");
    let held = *rep.heldout_nll.last().unwrap();
    assert!(held <= last + 0.5 * last.abs() + 0.1, "held-out {held} vs train {last}");
}

#[test]
fn non_finite_weights_abort_with_step_and_parameter() {
    let data = generate_nominal(&small_world(), 4).unwrap();
    let mut model = RaptModel::init(small_model(6), Normalizer::fit(&data).unwrap(), 5).unwrap();
    let name = model.params.keys().find(|k| k.contains("dec")).unwrap().clone();
    model.params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    match train(model, &data, &small_train(1)) {
        Err(RaptError::NonFiniteLoss { step, param }) => {
            assert_eq!(step, 0);
            assert!(!param.is_empty());
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn too_short_trajectories_are_rejected() {
    let data = vec![common::random_log(3, 5, 1), common::random_log(3, 40, 2)];
    let model = init_model(&data, small_model(3), 6).unwrap();
    assert!(matches!(
        train(model, &data, &small_train(1)),
        Err(RaptError::TrajectoryTooShort { .. })
    ));
}
