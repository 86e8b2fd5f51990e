//! Integrated gradients through time. The attributed quantity is the mean
//! NLL of the last step of a window, with gradients flowing back through
//! the recurrent state across the whole window.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{RaptError, Result};
use crate::model::{GraphModel, Objective, RaptModel};
use crate::par::ExecMode;
use crate::tensor::Tensor;
use crate::trajectory::TrajectoryLog;

/// Where on each of the `m` path segments the gradient is sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `alpha_j = (j + 0.5) / m`; error falls as `1/m^2`.
    #[default]
    Midpoint,
    /// `alpha_j = j / m` for `j = 1..=m`; error falls as `1/m`.
    Right,
}

/// How |attribution| is pooled over the window for the top-k ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Max,
    Sum,
}

impl Quadrature {
    pub fn alphas(self, m: usize) -> Vec<f64> {
        let m_f = m as f64;
        match self {
            Quadrature::Midpoint => (0..m).map(|j| (j as f64 + 0.5) / m_f).collect(),
            Quadrature::Right => (1..=m).map(|j| j as f64 / m_f).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Window length H.
    pub window: usize,
    /// Path points m.
    pub steps: usize,
    pub rule: Quadrature,
    pub top_k: usize,
    pub aggregate: Aggregate,
    /// Path points evaluated per graph.
    pub chunk_rows: usize,
    pub exec: ExecMode,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            window: 200,
            steps: 32,
            rule: Quadrature::Midpoint,
            top_k: 5,
            aggregate: Aggregate::Max,
            chunk_rows: 32,
            exec: ExecMode::default(),
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.chunk_rows == 0 {
            return Err(RaptError::Config("saliency window and chunk_rows must be >= 1".into()));
        }
        if self.steps < 8 {
            return Err(RaptError::Config(format!("saliency steps must be >= 8, got {}", self.steps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub dim: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// First step of the window in the source log.
    pub window_start: usize,
    /// One past the last step.
    pub window_end: usize,
    /// `[H][d_obs]` signed attributions.
    pub attributions: Vec<Vec<f64>>,
    pub top_k: Vec<RankedFeature>,
    pub completeness_gap: f64,
    pub f_input: f64,
    pub f_baseline: f64,
    pub steps: usize,
    pub baseline_kind: String,
}

impl SaliencyMap {
    pub fn window_len(&self) -> usize {
        self.attributions.len()
    }

    pub fn d_obs(&self) -> usize {
        self.attributions.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> f64 {
        self.attributions.iter().flatten().sum()
    }
}

/// Raw integrated-gradients output.
#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    /// `[H x d]`.
    pub attributions: Tensor,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_gap: f64,
}

/// Integrated gradients of a per-row objective over a `[H x d]` input.
///
/// `objective` receives one `[rows x d]` node per time step (row `j` is a
/// point on the straight path from `baseline` to `x`) and must return a
/// `[rows x 1]` node holding the objective of each row. Rows must not
/// interact.
pub fn integrated_gradients<'a, O>(
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    rule: Quadrature,
    chunk_rows: usize,
    exec: ExecMode,
    objective: O,
) -> Result<IgResult>
where
    O: Fn(&mut Graph<'a>, &[Var]) -> Result<Var> + Sync,
{
    if x.shape() != baseline.shape() || x.shape().len() != 2 {
        return Err(RaptError::Shape {
            op: "integrated_gradients",
            detail: format!("input {:?} vs baseline {:?}", x.shape(), baseline.shape()),
        });
    }
    if steps == 0 || chunk_rows == 0 {
        return Err(RaptError::Config("integration steps and chunk size must be >= 1".into()));
    }
    let (h, d) = (x.rows(), x.cols());
    let diff = x.zip_map(baseline, |a, b| a - b);
    let path_inputs = |g: &mut Graph<'a>, alphas: &[f64], grad: bool| -> Result<Vec<Var>> {
        (0..h)
            .map(|t| {
                let mut rows = Vec::with_capacity(alphas.len() * d);
                for &a in alphas {
                    rows.extend(baseline.row(t).iter().zip(diff.row(t)).map(|(b, dx)| b + a * dx));
                }
                let v = Tensor::matrix(alphas.len(), d, rows)?;
                Ok(if grad { g.input(v) } else { g.constant(v) })
            })
            .collect()
    };

    let alphas = rule.alphas(steps);
    let chunks: Vec<&[f64]> = alphas.chunks(chunk_rows).collect();
    let partial = exec.map(&chunks, |chunk| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xs = path_inputs(&mut g, chunk, true)?;
        let f = objective(&mut g, &xs)?;
        let total = g.sum(f);
        let grads = g.backward(total)?;
        let mut acc = vec![0.0; h * d];
        for (t, &v) in xs.iter().enumerate() {
            if let Some(gt) = grads.get(v) {
                for r in 0..gt.rows() {
                    for (a, &gv) in acc[t * d..(t + 1) * d].iter_mut().zip(gt.row(r)) {
                        *a += gv;
                    }
                }
            }
        }
        Ok(acc)
    });
    let mut grad_sum = vec![0.0; h * d];
    for p in partial {
        for (a, v) in grad_sum.iter_mut().zip(p?) {
            *a += v;
        }
    }
    if let Some(k) = grad_sum.iter().position(|v| !v.is_finite()) {
        return Err(RaptError::NonFiniteGradient {
            step: k / d,
            dim: k % d,
        });
    }
    let attributions = Tensor::matrix(
        h,
        d,
        grad_sum
            .iter()
            .zip(diff.data())
            .map(|(gs, dx)| dx * gs / steps as f64)
            .collect(),
    )?;

    let mut g = Graph::new();
    let xs = path_inputs(&mut g, &[0.0, 1.0], false)?;
    let f = objective(&mut g, &xs)?;
    let fv = g.value(f);
    let (f_baseline, f_input) = (fv.data()[0], fv.data()[1]);
    let completeness_gap = (attributions.sum() - (f_input - f_baseline)).abs();
    Ok(IgResult {
        attributions,
        f_input,
        f_baseline,
        completeness_gap,
    })
}

/// Per-row mean NLL of the final step of a window, starting from `h_pre`.
/// `actions` (normalized, one `[1 x d_act]` row per step) are held fixed
/// along the path.
pub fn final_step_objective<'m>(
    model: &'m RaptModel,
    g: &mut Graph<'m>,
    xs: &[Var],
    actions: Option<&[Vec<f64>]>,
    h_pre: &[f64],
) -> Result<Var> {
    let cfg = &model.config;
    let gm = GraphModel::register_frozen(g, model);
    let rows = g.value(xs[0]).rows();
    let steps = xs.len();
    if cfg.objective == Objective::Dynamics && steps < 2 {
        return Err(RaptError::Input("next-step objective needs a window of >= 2 steps".into()));
    }
    let repeat = |v: &[f64]| Tensor::matrix(rows, v.len(), v.repeat(rows));
    let mut h = g.constant(repeat(h_pre)?);
    // Under the next-step objective the last input only serves as target.
    let n_run = steps - cfg.target_offset();
    let mut last = None;
    for (t, &x) in xs.iter().enumerate().take(n_run) {
        let input = match actions {
            Some(a) if cfg.condition_on_actions => {
                let av = g.constant(repeat(&a[t])?);
                g.concat_cols(x, av)?
            }
            _ => x,
        };
        let (mu, lv, h_new) = gm.step(g, input, h)?;
        h = h_new;
        last = Some((mu, lv));
    }
    let (mu, lv) = last.expect("window has at least one step");
    let nll = g.gaussian_nll(xs[steps - 1], mu, lv)?;
    let avg = g.constant(Tensor::matrix(cfg.d_obs, 1, vec![1.0 / cfg.d_obs as f64; cfg.d_obs])?);
    g.matmul(nll, avg)
}

/// Hidden state after streaming `log[..upto]` from a zero state.
pub fn hidden_before(model: &RaptModel, log: &TrajectoryLog, upto: usize) -> Result<Vec<f64>> {
    let inf = model.inference::<f64>();
    let mut state = inf.new_state();
    for t in 0..upto.min(log.len()) {
        inf.score(&mut state, log.obs(t), log.action(t))?;
    }
    Ok(state.hidden().to_vec())
}

/// Attributions for `window` (raw observations) given the hidden state
/// that preceded it. The baseline is the all-zero trajectory in normalized
/// space, i.e. the training mean. `window_start` only labels the map.
pub fn integrated_gradients_time(
    model: &RaptModel,
    window: &TrajectoryLog,
    window_start: usize,
    h_pre: &[f64],
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    let c = &model.config;
    if window.is_empty() {
        return Err(RaptError::Input("empty saliency window".into()));
    }
    if window.d_obs() != c.d_obs || h_pre.len() != c.d_model {
        return Err(RaptError::Input(format!(
            "window has {} dims and h_pre {} entries; model expects {} and {}",
            window.d_obs(),
            h_pre.len(),
            c.d_obs,
            c.d_model
        )));
    }
    let h = window.len();
    let mut x = Vec::with_capacity(h * c.d_obs);
    for t in 0..h {
        x.extend(model.norm.normalize(window.obs(t), 0));
    }
    let x = Tensor::matrix(h, c.d_obs, x)?;
    if !x.is_finite() {
        return Err(RaptError::Input("saliency window contains non-finite observations".into()));
    }
    let actions: Option<Vec<Vec<f64>>> = if c.condition_on_actions {
        let rows = (0..h)
            .map(|t| {
                window
                    .action(t)
                    .map(|a| model.norm.normalize(a, c.d_obs))
                    .ok_or_else(|| RaptError::Input(format!("missing action at window step {t}")))
            })
            .collect::<Result<_>>()?;
        Some(rows)
    } else {
        None
    };
    let baseline = Tensor::zeros(x.shape());
    let ig = integrated_gradients(&x, &baseline, cfg.steps, cfg.rule, cfg.chunk_rows, cfg.exec, |g, xs| {
        final_step_objective(model, g, xs, actions.as_deref(), h_pre)
    })?;
    let attributions: Vec<Vec<f64>> = (0..h).map(|t| ig.attributions.row(t).to_vec()).collect();
    let mut map = SaliencyMap {
        window_start,
        window_end: window_start + h,
        attributions,
        top_k: Vec::new(),
        completeness_gap: ig.completeness_gap,
        f_input: ig.f_input,
        f_baseline: ig.f_baseline,
        steps: cfg.steps,
        baseline_kind: "normalized_zero".into(),
    };
    map.top_k = top_k_by(&map, cfg.top_k, cfg.aggregate);
    Ok(map)
}

/// Saliency for the window of up to `cfg.window` steps ending at `t_end`
/// (inclusive). Windows that would start before the log use the zero state.
pub fn saliency_at(model: &RaptModel, log: &TrajectoryLog, t_end: usize, cfg: &SaliencyConfig) -> Result<SaliencyMap> {
    if t_end >= log.len() {
        return Err(RaptError::Input(format!("step {t_end} beyond a {}-step log", log.len())));
    }
    let start = (t_end + 1).saturating_sub(cfg.window);
    let h_pre = hidden_before(model, log, start)?;
    integrated_gradients_time(model, &log.slice(start, t_end + 1), start, &h_pre, cfg)
}

/// Dimensions ranked by max-over-time |attribution|; ties go to the lower
/// index.
pub fn top_k_features(map: &SaliencyMap, k: usize) -> Vec<RankedFeature> {
    top_k_by(map, k, Aggregate::Max)
}

pub fn top_k_by(map: &SaliencyMap, k: usize, agg: Aggregate) -> Vec<RankedFeature> {
    let d = map.d_obs();
    let column = |dim: usize| map.attributions.iter().map(move |r: &Vec<f64>| r[dim].abs());
    let mut ranked: Vec<RankedFeature> = (0..d)
        .map(|dim| RankedFeature {
            dim,
            score: match agg {
                Aggregate::Max => column(dim).fold(0.0, f64::max),
                Aggregate::Sum => column(dim).sum(),
            },
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.dim.cmp(&b.dim)));
    ranked.truncate(k.min(d));
    ranked
}

fn heat_color(v: f64, scale: f64) -> String {
    let s = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if s >= 0.0 {
        format!("#ff{0:02x}{0:02x}", fade(s))
    } else {
        format!("#{0:02x}{0:02x}ff", fade(s))
    }
}

/// Writes `<stem>.csv` (one row per window step, one column per top-k
/// dimension) and `<stem>.svg`. Returns both paths.
pub fn emit_heatmap(map: &SaliencyMap, stem: &Path, names: Option<&[String]>) -> Result<(PathBuf, PathBuf)> {
    let dims: Vec<usize> = if map.top_k.is_empty() {
        (0..map.d_obs()).collect()
    } else {
        map.top_k.iter().map(|f| f.dim).collect()
    };
    let label = |i: usize| names.and_then(|n| n.get(i).cloned()).unwrap_or_else(|| format!("obs_{i}"));

    let mut csv = String::from("t");
    for &i in &dims {
        csv.push(',');
        csv.push_str(&label(i));
    }
    csv.push('\n');
    for (k, row) in map.attributions.iter().enumerate() {
        write!(csv, "{}", map.window_start + k).unwrap();
        for &i in &dims {
            write!(csv, ",{}", row[i]).unwrap();
        }
        csv.push('\n');
    }

    let (cell_w, cell_h, left, top) = (4.0, 18.0, 90.0, 24.0);
    let h = map.window_len();
    let width = left + cell_w * h as f64 + 10.0;
    let height = top + cell_h * dims.len() as f64 + 24.0;
    let scale = dims
        .iter()
        .flat_map(|&i| map.attributions.iter().map(move |r| r[i].abs()))
        .fold(0.0, f64::max);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{left}" y="14">steps {}..{} (max |attribution| {scale:.3e})</text>"#,
        map.window_start, map.window_end
    )
    .unwrap();
    for (r, &i) in dims.iter().enumerate() {
        let y = top + cell_h * r as f64;
        writeln!(svg, r#"<text x="4" y="{}">{}</text>"#, y + cell_h * 0.7, xml_escape(&label(i))).unwrap();
        for (k, row) in map.attributions.iter().enumerate() {
            writeln!(
                svg,
                r#"<rect x="{}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{}"/>"#,
                left + cell_w * k as f64,
                heat_color(row[i], scale)
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");

    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    fs::write(&csv_path, csv)?;
    fs::write(&svg_path, svg)?;
    Ok((csv_path, svg_path))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: Vec<Vec<f64>>) -> SaliencyMap {
        SaliencyMap {
            window_start: 0,
            window_end: rows.len(),
            attributions: rows,
            top_k: vec![],
            completeness_gap: 0.0,
            f_input: 0.0,
            f_baseline: 0.0,
            steps: 32,
            baseline_kind: "normalized_zero".into(),
        }
    }

    #[test]
    fn single_cell_ranks_first() {
        let m = map(vec![vec![0.0, 0.0, 0.0], vec![0.0, -2.0, 0.0]]);
        assert_eq!(top_k_features(&m, 1)[0].dim, 1);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = map(vec![vec![0.5, 1.0, -1.0, 0.2]]);
        let r = top_k_features(&m, 4);
        assert_eq!(r.iter().map(|f| f.dim).collect::<Vec<_>>(), vec![1, 2, 0, 3]);
        assert_eq!(top_k_features(&m, 10).len(), 4);
    }

    #[test]
    fn sum_pools_over_time() {
        let m = map(vec![vec![0.9, 0.0], vec![0.0, 0.6], vec![0.0, -0.6]]);
        assert_eq!(top_k_by(&m, 1, Aggregate::Max)[0].dim, 0);
        let r = top_k_by(&m, 2, Aggregate::Sum);
        assert_eq!(r[0].dim, 1);
        assert!((r[0].score - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_path_gives_zero_attributions() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ig = integrated_gradients(&x, &x, 8, Quadrature::Midpoint, 3, ExecMode::Sequential, |g, xs| {
            let a = g.mul(xs[0], xs[2])?;
            let t = g.tanh(a);
            let w = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0])?);
            g.matmul(t, w)
        })
        .unwrap();
        assert!(ig.attributions.data().iter().all(|&v| v == 0.0));
        assert_eq!(ig.completeness_gap, 0.0);
    }

    #[test]
    fn heat_colors() {
        assert_eq!(heat_color(1.0, 1.0), "#ff0000");
        assert_eq!(heat_color(-1.0, 1.0), "#0000ff");
        assert_eq!(heat_color(0.0, 1.0), "#ffffff");
        assert_eq!(heat_color(0.3, 0.0), "#ffffff");
    }
}
