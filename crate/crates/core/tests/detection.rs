mod common;

use common::{random_log, random_model, rng};
use rand::Rng;
use rapt_core::detect::{
    calibrate, detect, detect_episode, evaluate_gates, residual_stats, CalibrationConfig, CalibrationProfile,
};
use rapt_core::model::{InferenceModel, ModelConfig, RaptModel, ScoredStep};
use rapt_core::TrajectoryLog;

fn profile_1d(lo: f64, hi: f64) -> CalibrationProfile {
    CalibrationProfile {
        tau_max: vec![1.0],
        sigma: vec![0.2],
        tau_global: 1.0,
        sigma_global: 0.2,
        k_local: 5.0,
        k_global: 3.0,
        box_min: vec![lo],
        box_max: vec![hi],
        delta: 0.05,
        warmup: 0,
        calibration_steps: 100,
    }
}

fn scored(nll: Vec<f64>) -> ScoredStep {
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    ScoredStep {
        nll_per_dim: nll,
        nll_mean: mean,
        scored: true,
    }
}

fn tiny_model(seed: u64) -> RaptModel {
    random_model(
        ModelConfig {
            d_obs: 4,
            d_model: 12,
            n_blocks: 1,
            d_latent: 6,
            ..ModelConfig::default()
        },
        seed,
    )
}

#[test]
fn population_statistics_by_hand() {
    let rows = vec![vec![1.0, 7.0], vec![2.0, 7.0], vec![3.0, 7.0]];
    let s = residual_stats(&rows, &[4.0, 4.5, 5.0]).unwrap();
    assert_eq!(s.tau_max, vec![3.0, 7.0]);
    assert!((s.sigma[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(s.sigma[1], 0.0);
    assert_eq!(s.tau_global, 5.0);
    assert!(residual_stats(&rows[..1], &[1.0]).is_err());
}

#[test]
fn box_margin_boundary_is_strict() {
    let p = profile_1d(0.0, 1.0);
    let quiet = scored(vec![0.0]);
    assert!(!evaluate_gates(&p, 0, &quiet, &[1.05]).gate3.fired);
    assert!(evaluate_gates(&p, 0, &quiet, &[1.06]).gate3.fired);
    assert!(!evaluate_gates(&p, 0, &quiet, &[-0.05]).gate3.fired);
    assert!(evaluate_gates(&p, 0, &quiet, &[-0.06]).gate3.fired);
}

#[test]
fn constant_dimension_uses_absolute_floor() {
    let p = profile_1d(2.0, 2.0);
    let quiet = scored(vec![0.0]);
    // Floor is 1e-6 * (1 + 2).
    assert!(!evaluate_gates(&p, 0, &quiet, &[2.0 + 2e-6]).gate3.fired);
    assert!(evaluate_gates(&p, 0, &quiet, &[2.0 + 4e-6]).gate3.fired);
    assert!(evaluate_gates(&p, 0, &quiet, &[2.0 - 4e-6]).gate3.fired);
}

#[test]
fn threshold_equality_does_not_fire() {
    let p = profile_1d(0.0, 1.0);
    let at = 1.0 + 5.0 * 0.2;
    let v = evaluate_gates(&p, 0, &scored(vec![at]), &[0.5]);
    assert!(!v.gate1.fired);
    assert_eq!(v.gate1.margin, 0.0);
    let v = evaluate_gates(&p, 0, &scored(vec![at + 1e-9]), &[0.5]);
    assert!(v.gate1.fired && v.anomaly);
}

#[test]
fn one_hot_dimension_fires_max_gate_but_not_mean_gate() {
    let d = 20;
    let p = CalibrationProfile {
        tau_max: vec![1.0; d],
        sigma: vec![0.1; d],
        tau_global: 1.0,
        sigma_global: 0.1,
        box_min: vec![-1.0; d],
        box_max: vec![1.0; d],
        ..profile_1d(0.0, 1.0)
    };
    let mut nll = vec![0.5; d];
    nll[7] = 4.0;
    // Scalar form of the rules.
    let fires_local = nll.iter().enumerate().any(|(i, &l)| l > p.tau_max[i] + 5.0 * p.sigma[i]);
    let mean = nll.iter().sum::<f64>() / d as f64;
    let fires_global = mean > p.tau_global + 3.0 * p.sigma_global;
    assert!(fires_local && !fires_global);
    let v = evaluate_gates(&p, 3, &scored(nll), &[0.0; 20]);
    assert!(v.gate1.fired && !v.gate2.fired && !v.gate3.fired);
    assert_eq!(v.gate1.dim, 7);
    assert!((v.gate1.margin - 2.5).abs() < 1e-12);
}

#[test]
fn warmup_and_unscored_steps_cannot_fire_learned_gates() {
    let p = CalibrationProfile {
        warmup: 10,
        ..profile_1d(0.0, 1.0)
    };
    let hot = scored(vec![50.0]);
    let v = evaluate_gates(&p, 9, &hot, &[0.5]);
    assert!(!v.live && !v.anomaly);
    assert_eq!(v.normalized.gate1, None);
    assert!(evaluate_gates(&p, 10, &hot, &[0.5]).gate1.fired);
    // Gate 3 is live from the first step.
    assert!(evaluate_gates(&p, 0, &hot, &[9.0]).gate3.fired);
}

#[test]
fn non_finite_observation_is_a_range_violation() {
    let m = tiny_model(1);
    let inf = m.inference::<f64>();
    let cal = random_log(4, 80, 2);
    let p = calibrate(&inf, &cal, &[], &CalibrationConfig::default()).unwrap();
    let mut st = inf.new_state();
    for t in 0..20 {
        detect(&inf, &p, &mut st, cal.obs(t), None).unwrap();
    }
    let hidden = st.hidden().to_vec();
    let v = detect(&inf, &p, &mut st, &[0.0, f64::NAN, 0.0, f64::INFINITY], None).unwrap();
    assert!(v.gate3.fired && v.gate3.non_finite && v.anomaly);
    assert_eq!(v.gate3.violations, vec![1, 3]);
    assert!(v.gate1.margin.is_finite() && v.gate2.margin.is_finite());
    assert_eq!(st.hidden(), &hidden[..]);
}

#[test]
fn calibration_replay_fires_nothing() {
    for seed in 0..5 {
        let m = tiny_model(seed);
        let inf = m.inference::<f64>();
        let cal = random_log(4, 200, 100 + seed);
        let train = vec![random_log(4, 50, 200 + seed)];
        let p = calibrate(&inf, &cal, &train, &CalibrationConfig::default()).unwrap();
        p.validate().unwrap();
        assert_eq!(p.calibration_steps, 190);
        let ep = detect_episode(&inf, &p, &cal).unwrap();
        assert!(!ep.flagged, "seed {seed}: fired at {:?}", ep.first_detection);
        assert!(ep.verdicts.iter().all(|v| !v.gate1.fired && !v.gate2.fired && !v.gate3.fired));
    }
}

#[test]
fn single_anomalous_step_sets_first_detection() {
    let m = tiny_model(3);
    let inf = m.inference::<f64>();
    let cal = random_log(4, 120, 9);
    let p = calibrate(&inf, &cal, &[], &CalibrationConfig::default()).unwrap();
    let mut bad = cal.clone();
    bad.obs_mut(57)[2] = 40.0;
    let ep = detect_episode(&inf, &p, &bad).unwrap();
    assert!(ep.flagged);
    assert_eq!(ep.first_detection, Some(57));
    assert_eq!(ep.verdicts[57].gate3.violations, vec![2]);
}

/// Independent per-step scan of the gate rules from raw scores.
fn scan_oracle(inf: &InferenceModel<f64>, p: &CalibrationProfile, log: &TrajectoryLog) -> (Vec<bool>, f64) {
    let steps = inf.score_log(log).unwrap();
    let mut flags = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (t, s) in steps.iter().enumerate() {
        let live = s.scored && t >= p.warmup;
        let mut fired = false;
        let mut score = f64::NEG_INFINITY;
        if live {
            for i in 0..p.d_obs() {
                let thr = p.tau_max[i] + p.k_local * p.sigma[i];
                fired |= s.nll_per_dim[i] > thr;
                score = score.max((s.nll_per_dim[i] - thr) / (p.k_local * p.sigma[i] + 1e-6));
            }
            let thr = p.tau_global + p.k_global * p.sigma_global;
            fired |= s.nll_mean > thr;
            score = score.max((s.nll_mean - thr) / (p.k_global * p.sigma_global + 1e-6));
        }
        for (i, &o) in log.obs(t).iter().enumerate() {
            let w = (p.delta * (p.box_max[i] - p.box_min[i])).max(1e-6 * (1.0 + p.box_min[i].abs()));
            let (lo, hi) = (p.box_min[i] - w, p.box_max[i] + w);
            fired |= o < lo || o > hi;
            score = score.max((lo - o).max(o - hi) / w);
        }
        flags.push(fired);
        best = best.max(score);
    }
    (flags, best)
}

#[test]
fn episode_scores_match_brute_force_scan() {
    let m = tiny_model(4);
    let inf = m.inference::<f64>();
    let cal = random_log(4, 150, 1);
    let p = calibrate(&inf, &cal, &[], &CalibrationConfig::default()).unwrap();
    let mut r = rng(77);
    for k in 0..10 {
        let mut log = random_log(4, 100, 500 + k);
        for _ in 0..3 {
            let t = r.random_range(0..100);
            let i = r.random_range(0..4);
            log.obs_mut(t)[i] *= r.random_range(0.5..4.0);
        }
        let ep = detect_episode(&inf, &p, &log).unwrap();
        let (flags, best) = scan_oracle(&inf, &p, &log);
        assert_eq!(ep.verdicts.iter().map(|v| v.anomaly).collect::<Vec<_>>(), flags);
        assert_eq!(ep.score, best);
        assert_eq!(ep.first_detection, flags.iter().position(|&f| f));
    }
}

#[test]
fn raising_k_never_adds_fired_steps() {
    let m = tiny_model(5);
    let inf = m.inference::<f64>();
    let cal = random_log(4, 150, 2);
    let base = calibrate(&inf, &cal, &[], &CalibrationConfig::default()).unwrap();
    let log = random_log(4, 300, 3);
    let fired = |p: &CalibrationProfile| -> Vec<(bool, bool)> {
        detect_episode(&inf, p, &log)
            .unwrap()
            .verdicts
            .iter()
            .map(|v| (v.gate1.fired, v.gate2.fired))
            .collect()
    };
    let ks = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0];
    let mut prev: Option<Vec<(bool, bool)>> = None;
    let mut any = false;
    for &k in &ks {
        let cur = fired(&base.with_k(k, k));
        any |= cur.iter().any(|&(a, b)| a || b);
        if let Some(p) = &prev {
            for (a, b) in cur.iter().zip(p) {
                assert!(!a.0 || b.0, "gate1 gained a step at k={k}");
                assert!(!a.1 || b.1, "gate2 gained a step at k={k}");
            }
        }
        prev = Some(cur);
    }
    assert!(any, "sweep never fired; test is vacuous");
}

#[test]
fn streaming_equals_whole_log() {
    let m = tiny_model(6);
    let inf = m.inference::<f64>();
    let cal = random_log(4, 100, 4);
    let p = calibrate(&inf, &cal, &[], &CalibrationConfig::default()).unwrap();
    for k in 0..10 {
        let log = random_log(4, 60, 900 + k);
        let ep = detect_episode(&inf, &p, &log).unwrap();
        let mut st = inf.new_state();
        for t in 0..log.len() {
            let v = detect(&inf, &p, &mut st, log.obs(t), None).unwrap();
            assert!(v.same_decision(&ep.verdicts[t]));
        }
    }
}

#[test]
fn profile_round_trips_through_json() {
    let p = profile_1d(-1.0, 3.0);
    let text = serde_json::to_string(&p).unwrap();
    assert_eq!(serde_json::from_str::<CalibrationProfile>(&text).unwrap(), p);
    let bad = CalibrationProfile {
        box_min: vec![4.0],
        ..p
    };
    assert!(bad.validate().is_err());
}
