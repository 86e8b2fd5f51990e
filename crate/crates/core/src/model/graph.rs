//! Training-mode forward pass that records onto an autodiff [`Graph`].

use super::names::*;
use super::{ModelConfig, RaptModel, LN_EPS};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

struct Block {
    w: Var,
    b: Var,
    gamma: Var,
    beta: Var,
}

/// The model's parameters registered on one graph.
pub struct GraphModel<'m> {
    config: &'m ModelConfig,
    enc_w: Var,
    enc_b: Var,
    blocks: Vec<Block>,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hn: Var,
    bot_w: Var,
    bot_b: Var,
    bot_g: Var,
    bot_beta: Var,
    dec_hw: Var,
    dec_hb: Var,
    dec_ow: Var,
    dec_ob: Var,
}

/// A time-major batch of windows: `inputs[t]` is `[rows x d_in]`,
/// `targets[t]` is `[rows x d_obs]`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl WindowBatch {
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::rows)
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

impl<'m> GraphModel<'m> {
    pub fn register(g: &mut Graph<'m>, model: &'m RaptModel) -> Self {
        Self::register_with(g, model, true)
    }

    /// Registers the weights without gradients (input attribution only).
    pub fn register_frozen(g: &mut Graph<'m>, model: &'m RaptModel) -> Self {
        Self::register_with(g, model, false)
    }

    fn register_with(g: &mut Graph<'m>, model: &'m RaptModel, trainable: bool) -> Self {
        let p = |g: &mut Graph<'m>, name: &str| {
            let t = &model.params[name];
            if trainable {
                g.param(name, t)
            } else {
                g.frozen_param(name, t)
            }
        };
        let blocks = (0..model.config.n_blocks)
            .map(|i| Block {
                w: p(g, &block(i, "linear.weight")),
                b: p(g, &block(i, "linear.bias")),
                gamma: p(g, &block(i, "norm.gamma")),
                beta: p(g, &block(i, "norm.beta")),
            })
            .collect();
        Self {
            config: &model.config,
            enc_w: p(g, ENC_IN_W),
            enc_b: p(g, ENC_IN_B),
            blocks,
            w_ih: p(g, GRU_W_IH),
            w_hh: p(g, GRU_W_HH),
            b_ih: p(g, GRU_B_IH),
            b_hn: p(g, GRU_B_HN),
            bot_w: p(g, BOT_W),
            bot_b: p(g, BOT_B),
            bot_g: p(g, BOT_G),
            bot_beta: p(g, BOT_BETA),
            dec_hw: p(g, DEC_H_W),
            dec_hb: p(g, DEC_H_B),
            dec_ow: p(g, DEC_O_W),
            dec_ob: p(g, DEC_O_B),
        }
    }

    /// Input projection followed by `x <- ReLU(LN(x + Linear(x)))` blocks.
    pub fn encode(&self, g: &mut Graph<'m>, x: Var) -> Result<Var> {
        let mut x = g.linear(x, self.enc_w, Some(self.enc_b))?;
        for blk in &self.blocks {
            let f = g.linear(x, blk.w, Some(blk.b))?;
            let s = g.add(x, f)?;
            let n = g.layer_norm(s, blk.gamma, blk.beta, LN_EPS)?;
            x = g.relu(n);
        }
        Ok(x)
    }

    /// One GRU update; the cell output equals the new hidden state.
    pub fn gru(&self, g: &mut Graph<'m>, e: Var, h_prev: Var) -> Result<Var> {
        gru_cell(g, e, h_prev, self.w_ih, self.w_hh, self.b_ih, self.b_hn, self.config.d_model)
    }

    /// Bottleneck and decoder: returns `(mu, clamped logvar)`.
    pub fn decode(&self, g: &mut Graph<'m>, hidden: Var) -> Result<(Var, Var)> {
        let p = g.linear(hidden, self.bot_w, Some(self.bot_b))?;
        let p = g.layer_norm(p, self.bot_g, self.bot_beta, LN_EPS)?;
        let z = g.relu(p);
        let u = g.linear(z, self.dec_hw, Some(self.dec_hb))?;
        let u = g.relu(u);
        let out = g.linear(u, self.dec_ow, Some(self.dec_ob))?;
        let d_obs = self.config.d_obs;
        let mu = g.slice_cols(out, 0, d_obs)?;
        let lv = g.slice_cols(out, d_obs, d_obs)?;
        let [lo, hi] = self.config.logvar_clamp;
        Ok((mu, g.clamp(lv, lo, hi)))
    }

    /// Full step: returns `(mu, logvar, h)`.
    pub fn config(&self) -> &'m ModelConfig {
        self.config
    }

    pub fn step(&self, g: &mut Graph<'m>, x: Var, h_prev: Var) -> Result<(Var, Var, Var)> {
        let e = self.encode(g, x)?;
        let h = self.gru(g, e, h_prev)?;
        let (mu, lv) = self.decode(g, h)?;
        Ok((mu, lv, h))
    }

    /// Unrolls a batch from a zero hidden state and returns
    /// `sum(nll) * scale` as the loss node together with the raw NLL sum.
    pub fn window_loss(
        &self,
        g: &mut Graph<'m>,
        batch: &WindowBatch,
        scale: f64,
    ) -> Result<(Var, f64)> {
        let rows = batch.rows();
        let mut h = g.constant(Tensor::zeros(&[rows, self.config.d_model]));
        let mut total: Option<Var> = None;
        for (input, target) in batch.inputs.iter().zip(&batch.targets) {
            let x = g.constant(input.clone());
            let (mu, lv, h_new) = self.step(g, x, h)?;
            let tgt = g.constant(target.clone());
            let nll = g.gaussian_nll(tgt, mu, lv)?;
            let s = g.sum(nll);
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
            h = h_new;
        }
        let total = total.ok_or_else(|| crate::RaptError::Input("empty window batch".into()))?;
        let raw = g.value(total).item();
        Ok((g.scale(total, scale), raw))
    }
}

/// GRU cell on graph nodes with gate order `(z, r, n)` along the stacked
/// weight rows:
///
/// ```text
/// z = sigmoid(W_z e + U_z h + b_z)
/// r = sigmoid(W_r e + U_r h + b_r)
/// n = tanh(W_n e + b_in + r * (U_n h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[allow(clippy::too_many_arguments)]
pub fn gru_cell<'m>(
    g: &mut Graph<'m>,
    e: Var,
    h_prev: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hn: Var,
    d: usize,
) -> Result<Var> {
    let gi = g.linear(e, w_ih, Some(b_ih))?;
    let gh = g.linear(h_prev, w_hh, None)?;
    let (iz, ir, inn) = (g.slice_cols(gi, 0, d)?, g.slice_cols(gi, d, d)?, g.slice_cols(gi, 2 * d, d)?);
    let (hz, hr, hn) = (g.slice_cols(gh, 0, d)?, g.slice_cols(gh, d, d)?, g.slice_cols(gh, 2 * d, d)?);
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z);
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r);
    let hn = g.add_row(hn, b_hn)?;
    let rh = g.mul(r, hn)?;
    let n = g.add(inn, rh)?;
    let n = g.tanh(n);
    // h' = n + z * (h - n)
    let diff = g.sub(h_prev, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}
