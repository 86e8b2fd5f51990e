use rapt_core::autodiff::{Graph, ParamSet};
use rapt_core::model::{
    GraphModel, InferenceModel, ModelConfig, Normalizer, Objective, RaptModel, WindowBatch,
};
use rapt_core::{Tensor, TrajectoryLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_obs: 4,
        d_model: 8,
        n_blocks: 2,
        d_latent: 6,
        ..ModelConfig::default()
    }
}

/// Model with every tensor (including biases and LN affines) randomized so
/// no code path is trivially zero.
fn random_model(cfg: ModelConfig, seed: u64) -> RaptModel {
    let width = cfg.d_obs + cfg.d_act;
    let mut m = RaptModel::init(cfg, Normalizer::identity(width), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in m.params.iter_mut() {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + rng.random_range(-0.4..0.4);
        }
    }
    m
}

fn random_log(d_obs: usize, len: usize, seed: u64) -> TrajectoryLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = TrajectoryLog::new(d_obs, 0);
    for t in 0..len {
        let row: Vec<f64> = (0..d_obs).map(|_| rng.random_range(-2.0..2.0)).collect();
        log.push(t as f64, &row, None).unwrap();
    }
    log
}

// ── hand-unrolled oracle ──────────────────────────────────────────────────

fn mat(p: &ParamSet, name: &str) -> Vec<Vec<f64>> {
    let t = &p[name];
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecp(p: &ParamSet, name: &str) -> Vec<f64> {
    p[name].data().to_vec()
}

fn affine(w: &[Vec<f64>], x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(o, row)| {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += row[i] * x[i];
            }
            s + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Returns (mu, logvar, h) for one step, written without any library kernels.
fn oracle_step(m: &RaptModel, x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = &m.params;
    let c = &m.config;
    let d = c.d_model;
    let mut e = affine(&mat(p, "encoder.input.weight"), x, Some(&vecp(p, "encoder.input.bias")));
    for i in 0..c.n_blocks {
        let f = affine(
            &mat(p, &format!("encoder.block{i}.linear.weight")),
            &e,
            Some(&vecp(p, &format!("encoder.block{i}.linear.bias"))),
        );
        let s: Vec<f64> = e.iter().zip(&f).map(|(a, b)| a + b).collect();
        let n = ln(
            &s,
            &vecp(p, &format!("encoder.block{i}.norm.gamma")),
            &vecp(p, &format!("encoder.block{i}.norm.beta")),
        );
        e = n.iter().map(|v| v.max(0.0)).collect();
    }
    let gi = affine(&mat(p, "gru.weight_ih"), &e, Some(&vecp(p, "gru.bias_ih")));
    let gh = affine(&mat(p, "gru.weight_hh"), h, None);
    let bhn = vecp(p, "gru.bias_hn");
    let mut hn = vec![0.0; d];
    for j in 0..d {
        let z = sig(gi[j] + gh[j]);
        let r = sig(gi[d + j] + gh[d + j]);
        let n = (gi[2 * d + j] + r * (gh[2 * d + j] + bhn[j])).tanh();
        hn[j] = (1.0 - z) * n + z * h[j];
    }
    let zp = affine(&mat(p, "bottleneck.weight"), &hn, Some(&vecp(p, "bottleneck.bias")));
    let z: Vec<f64> = ln(&zp, &vecp(p, "bottleneck.norm.gamma"), &vecp(p, "bottleneck.norm.beta"))
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    let u: Vec<f64> = affine(&mat(p, "decoder.hidden.weight"), &z, Some(&vecp(p, "decoder.hidden.bias")))
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    let out = affine(&mat(p, "decoder.out.weight"), &u, Some(&vecp(p, "decoder.out.bias")));
    let mu = out[..c.d_obs].to_vec();
    let lv = out[c.d_obs..]
        .iter()
        .map(|v| v.clamp(c.logvar_clamp[0], c.logvar_clamp[1]))
        .collect();
    (mu, lv, hn)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn inference_matches_hand_unrolled_oracle() {
    let m = random_model(tiny_config(), 3);
    let inf = m.inference::<f64>();
    let log = random_log(4, 6, 9);
    let mut h = vec![0.0; 8];
    for t in 0..log.len() {
        let out = inf.step(log.obs(t), None, &h, None).unwrap();
        let (mu, lv, hn) = oracle_step(&m, log.obs(t), &h);
        close(&out.mu, &mu, 1e-12);
        close(&out.logvar, &lv, 1e-12);
        close(&out.hidden, &hn, 1e-12);
        h = hn;
    }
}

#[test]
fn graph_forward_matches_hand_unrolled_oracle() {
    let m = random_model(tiny_config(), 4);
    let x = vec![0.3, -1.2, 0.7, 2.0];
    let h = vec![0.1; 8];
    let mut g = Graph::new();
    let gm = GraphModel::register(&mut g, &m);
    let xv = g.constant(Tensor::matrix(1, 4, x.clone()).unwrap());
    let hv = g.constant(Tensor::matrix(1, 8, h.clone()).unwrap());
    let (mu, lv, hn) = gm.step(&mut g, xv, hv).unwrap();
    let (omu, olv, oh) = oracle_step(&m, &x, &h);
    close(g.value(mu).data(), &omu, 1e-12);
    close(g.value(lv).data(), &olv, 1e-12);
    close(g.value(hn).data(), &oh, 1e-12);
}

#[test]
fn zero_residual_branch_reduces_block_to_relu_ln() {
    let mut m = random_model(tiny_config(), 5);
    for i in 0..2 {
        for leaf in ["linear.weight", "linear.bias", "norm.beta"] {
            m.params.get_mut(&format!("encoder.block{i}.{leaf}")).unwrap().data_mut().fill(0.0);
        }
        m.params.get_mut(&format!("encoder.block{i}.norm.gamma")).unwrap().data_mut().fill(1.0);
    }
    let x = Tensor::matrix(1, 4, vec![0.5, -0.25, 1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let gm = GraphModel::register(&mut g, &m);
    let xv = g.constant(x.clone());
    let e = gm.encode(&mut g, xv).unwrap();
    let got = g.value(e).data().to_vec();
    assert_eq!(got.len(), 8);

    let proj = affine(&mat(&m.params, "encoder.input.weight"), x.data(), Some(&vecp(&m.params, "encoder.input.bias")));
    let mut expect = proj;
    for _ in 0..2 {
        expect = ln(&expect, &[1.0; 8], &[0.0; 8]).iter().map(|v| v.max(0.0)).collect();
    }
    close(&got, &expect, 1e-12);
}

#[test]
fn nll_reference_values() {
    // One-dimensional model whose decoder emits a fixed (mu, logvar): zero
    // every weight and place the values in the output bias.
    let cfg = ModelConfig {
        d_obs: 1,
        d_model: 2,
        n_blocks: 1,
        d_latent: 2,
        ..ModelConfig::default()
    };
    let mut m = RaptModel::init(cfg, Normalizer::identity(1), 0).unwrap();
    for (name, t) in m.params.iter_mut() {
        if !name.ends_with("gamma") {
            t.data_mut().fill(0.0);
        }
    }
    let cases = [
        (0.0, 0.0, 0.0, 0.918_938_533_204_672_7),
        (1.0, 0.0, 0.0, 1.418_938_533_204_672_7),
        (2.0, 0.0, 4f64.ln(), 2.112_085_713_764_618),
    ];
    for (target, mu, logvar, expected) in cases {
        m.params.get_mut("decoder.out.bias").unwrap().data_mut().copy_from_slice(&[mu, logvar]);
        let inf = m.inference::<f64>();
        let out = inf.step(&[target], None, &[0.0, 0.0], None).unwrap();
        assert!((out.nll_per_dim[0] - expected).abs() < 1e-12, "{:?}", out.nll_per_dim);
        assert_eq!(out.nll_mean, out.nll_per_dim[0]);
    }
}

#[test]
fn gru_with_zero_weights_halves_hidden_state() {
    let mut m = random_model(tiny_config(), 6);
    for name in ["gru.weight_ih", "gru.weight_hh", "gru.bias_ih", "gru.bias_hn"] {
        m.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let inf = m.inference::<f64>();
    let out = inf.step(&[1.0, 2.0, 3.0, 4.0], None, &[1.0; 8], None).unwrap();
    close(&out.hidden, &[0.5; 8], 1e-15);
    let out = inf.step(&[1.0, 2.0, 3.0, 4.0], None, &[0.0; 8], None).unwrap();
    close(&out.hidden, &[0.0; 8], 0.0);
}

#[test]
fn forward_sequence_single_step_and_split_equivalence() {
    let m = random_model(tiny_config(), 7);
    let inf: InferenceModel<f64> = m.inference();
    let log = random_log(4, 12, 11);
    let h0 = vec![0.0; 8];

    let (one, _) = inf.forward_sequence(&log.slice(0, 1), &h0).unwrap();
    let single = inf.step(log.obs(0), None, &h0, None).unwrap();
    assert_eq!(one[0], single);

    let (whole, h_whole) = inf.forward_sequence(&log, &h0).unwrap();
    for k in [1, 5, 11] {
        let (a, h_mid) = inf.forward_sequence(&log.slice(0, k), &h0).unwrap();
        let (b, h_end) = inf.forward_sequence(&log.slice(k, 12), &h_mid).unwrap();
        let joined: Vec<_> = a.into_iter().chain(b).collect();
        assert_eq!(joined, whole);
        assert_eq!(h_end, h_whole);
    }
    assert!(inf.forward_sequence(&log.slice(0, 0), &h0).is_err());
}

#[test]
fn outputs_are_causal() {
    let m = random_model(tiny_config(), 8);
    let inf = m.inference::<f64>();
    let log = random_log(4, 10, 1);
    let mut altered = log.clone();
    for t in 6..10 {
        altered.obs_mut(t).iter_mut().for_each(|v| *v += 5.0);
    }
    let a = inf.score_log(&log).unwrap();
    let b = inf.score_log(&altered).unwrap();
    assert_eq!(a[..6], b[..6]);
    assert_ne!(a[6], b[6]);
}

#[test]
fn adversarial_inputs_stay_clamped_and_finite() {
    let m = random_model(tiny_config(), 9);
    let inf = m.inference::<f64>();
    for scale in [1e6, -1e6] {
        let out = inf.step(&[scale; 4], None, &[0.0; 8], None).unwrap();
        assert!(out.logvar.iter().all(|v| (-10.0..=10.0).contains(v)));
        assert!(out.nll_per_dim.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn next_step_objective_scores_following_observation() {
    let cfg = ModelConfig {
        objective: Objective::Dynamics,
        ..tiny_config()
    };
    let m = random_model(cfg, 10);
    let inf = m.inference::<f64>();
    let log = random_log(4, 5, 2);
    let scored = inf.score_log(&log).unwrap();
    assert!(!scored[0].scored);
    let (outs, _) = inf.forward_sequence(&log, &[0.0; 8]).unwrap();
    assert_eq!(outs.len(), 4);
    for t in 1..5 {
        assert!(scored[t].scored);
        close(&scored[t].nll_per_dim, &outs[t - 1].nll_per_dim, 1e-14);
    }
    assert!(inf.step(log.obs(0), None, &[0.0; 8], None).is_err());
}

#[test]
fn action_conditioning_widens_encoder_input() {
    let cfg = ModelConfig {
        d_act: 2,
        condition_on_actions: true,
        objective: Objective::Dynamics,
        ..tiny_config()
    };
    let m = RaptModel::init(cfg, Normalizer::identity(6), 1).unwrap();
    assert_eq!(m.params["encoder.input.weight"].shape(), &[8, 6]);
    let inf = m.inference::<f64>();
    let mut state = inf.new_state();
    assert!(inf.score(&mut state, &[0.0; 4], None).is_err());
    inf.score(&mut state, &[0.0; 4], Some(&[1.0, 2.0])).unwrap();
}

#[test]
fn window_loss_is_mean_of_inference_nll() {
    let m = random_model(tiny_config(), 12);
    let inf = m.inference::<f64>();
    let logs = [random_log(4, 5, 20), random_log(4, 5, 21)];
    let mut inputs = Vec::new();
    for t in 0..5 {
        let mut data = Vec::new();
        for log in &logs {
            data.extend_from_slice(log.obs(t));
        }
        inputs.push(Tensor::matrix(2, 4, data).unwrap());
    }
    let batch = WindowBatch {
        inputs: inputs.clone(),
        targets: inputs,
    };
    let mut g = Graph::new();
    let gm = GraphModel::register(&mut g, &m);
    let (_, raw) = gm.window_loss(&mut g, &batch, 1.0).unwrap();
    let expected: f64 = logs
        .iter()
        .flat_map(|l| inf.score_log(l).unwrap())
        .map(|s| s.nll_per_dim.iter().sum::<f64>())
        .sum();
    assert!((raw - expected).abs() < 1e-10, "{raw} vs {expected}");
}

#[test]
fn f32_path_tracks_f64_path() {
    let m = random_model(tiny_config(), 13);
    let log = random_log(4, 20, 3);
    let a = m.inference::<f64>().score_log(&log).unwrap();
    let b = m.inference::<f32>().score_log(&log).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.nll_mean - y.nll_mean).abs() < 1e-3 * (1.0 + x.nll_mean.abs()));
    }
}
