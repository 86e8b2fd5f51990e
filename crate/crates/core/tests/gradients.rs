mod common;

use std::time::Instant;

use common::{finite_difference_check, random_batch, random_model};
use rapt_core::autodiff::Graph;
use rapt_core::model::{GraphModel, ModelConfig, Objective};
use rapt_core::Tensor;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_obs: 6,
        d_model: 16,
        d_latent: 8,
        n_blocks: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn full_model_gradients_match_central_differences() {
    let start = Instant::now();
    let model = random_model(tiny(), 3);
    let batch = random_batch(6, 6, 3, 5, 9);
    let rep = finite_difference_check(&model, &batch, 1e-5);
    assert_eq!(rep.checked, model.param_count());
    assert!(rep.max_rel < 1e-4, "max rel err {} at {}", rep.max_rel, rep.worst);
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn action_conditioned_dynamics_gradients_match() {
    let cfg = ModelConfig {
        d_obs: 3,
        d_act: 2,
        d_model: 8,
        d_latent: 4,
        n_blocks: 1,
        objective: Objective::Dynamics,
        condition_on_actions: true,
        ..ModelConfig::default()
    };
    let model = random_model(cfg, 4);
    let batch = random_batch(5, 3, 2, 4, 10);
    let rep = finite_difference_check(&model, &batch, 1e-5);
    assert!(rep.max_rel < 1e-4, "max rel err {} at {}", rep.max_rel, rep.worst);
}

/// Gradient reaching the first hidden state through T GRU steps equals the
/// product of per-step Jacobians, estimated here by perturbing h0 directly.
#[test]
fn gradient_flows_back_through_every_step() {
    let model = random_model(tiny(), 5);
    let batch = random_batch(6, 6, 1, 5, 11);
    let loss_from = |h0: &Tensor| -> (f64, Tensor) {
        let mut g = Graph::new();
        let gm = GraphModel::register_frozen(&mut g, &model);
        let mut h = g.input(h0.clone());
        let h_start = h;
        let mut total = None;
        for (x, y) in batch.inputs.iter().zip(&batch.targets) {
            let x = g.constant(x.clone());
            let (mu, lv, hn) = gm.step(&mut g, x, h).unwrap();
            let y = g.constant(y.clone());
            let nll = g.gaussian_nll(y, mu, lv).unwrap();
            let s = g.sum(nll);
            total = Some(match total {
                Some(a) => g.add(a, s).unwrap(),
                None => s,
            });
            h = hn;
        }
        let loss = total.unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item(), grads.get(h_start).unwrap().clone())
    };
    let h0 = Tensor::matrix(1, 16, (0..16).map(|i| 0.05 * i as f64 - 0.4).collect()).unwrap();
    let (_, analytic) = loss_from(&h0);
    for k in 0..16 {
        let mut up = h0.clone();
        up.data_mut()[k] += 1e-5;
        let mut down = h0.clone();
        down.data_mut()[k] -= 1e-5;
        let numeric = (loss_from(&up).0 - loss_from(&down).0) / 2e-5;
        let a = analytic.data()[k];
        assert!((a - numeric).abs() <= 1e-5 * a.abs().max(1e-3), "h0[{k}]: {a} vs {numeric}");
    }
}
