use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DiagnosisError, FailureTaxonomy};
use crate::detect::AnomalyVerdict;
use crate::saliency::SaliencyMap;
use crate::trajectory::TrajectoryLog;

/// Most salient channels a request may carry.
pub const MAX_TOP_K: usize = 10;
/// Time rows in the prompt tables.
pub const MAX_ROWS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trail {
    pub dim: usize,
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub step: usize,
    pub gate1_fired: bool,
    pub gate1_dim: usize,
    pub gate1_margin: f64,
    pub gate2_fired: bool,
    pub gate2_margin: f64,
    pub gate3_fired: bool,
    pub gate3_violations: Vec<usize>,
}

impl From<&AnomalyVerdict> for GateSummary {
    fn from(v: &AnomalyVerdict) -> Self {
        let finite = |x: f64| if x.is_finite() { x } else { 0.0 };
        Self {
            step: v.t,
            gate1_fired: v.gate1.fired,
            gate1_dim: v.gate1.dim,
            gate1_margin: finite(v.gate1.margin),
            gate2_fired: v.gate2.fired,
            gate2_margin: finite(v.gate2.margin),
            gate3_fired: v.gate3.fired,
            gate3_violations: v.gate3.violations.clone(),
        }
    }
}

/// Opaque pointer to a camera key-frame; passed through, never decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRequest {
    pub incident_id: String,
    pub channel_names: Vec<String>,
    pub saliency: SaliencyMap,
    /// Raw values of the top-k channels over the saliency window.
    pub trails: Vec<Trail>,
    /// Commanded values over the window, when the log carries actions.
    pub commanded: Vec<Trail>,
    pub gates: GateSummary,
    pub image: Option<ImageRef>,
    pub taxonomy: FailureTaxonomy,
}

impl DiagnosisRequest {
    /// Assembles a request from a log, its saliency map and the verdict
    /// that triggered diagnosis.
    pub fn from_parts(
        incident_id: impl Into<String>,
        log: &TrajectoryLog,
        saliency: SaliencyMap,
        verdict: &AnomalyVerdict,
        channel_names: Vec<String>,
        taxonomy: FailureTaxonomy,
    ) -> Self {
        let window = saliency.window_start..saliency.window_end.min(log.len());
        let trails = saliency
            .top_k
            .iter()
            .take(MAX_TOP_K)
            .map(|f| Trail {
                dim: f.dim,
                name: name_of(&channel_names, f.dim),
                values: window.clone().map(|t| log.obs(t)[f.dim]).collect(),
            })
            .collect();
        let commanded = (0..log.d_act().min(MAX_TOP_K))
            .map(|k| Trail {
                dim: k,
                name: format!("cmd_{k}"),
                values: window.clone().filter_map(|t| log.action(t).map(|a| a[k])).collect(),
            })
            .collect();
        Self {
            incident_id: incident_id.into(),
            channel_names,
            saliency,
            trails,
            commanded,
            gates: GateSummary::from(verdict),
            image: None,
            taxonomy,
        }
    }

    pub fn validate(&self) -> Result<(), DiagnosisError> {
        self.taxonomy.validate()?;
        let bad = |m: String| Err(DiagnosisError::InvalidRequest(m));
        if self.saliency.top_k.len() > MAX_TOP_K || self.trails.len() > MAX_TOP_K {
            return bad(format!("at most {MAX_TOP_K} salient channels per request"));
        }
        let numbers = self
            .saliency
            .attributions
            .iter()
            .flatten()
            .chain(self.trails.iter().flat_map(|t| &t.values))
            .chain(self.commanded.iter().flat_map(|t| &t.values))
            .chain(self.saliency.top_k.iter().map(|f| &f.score))
            .chain([&self.gates.gate1_margin, &self.gates.gate2_margin]);
        if numbers.into_iter().any(|v| !v.is_finite()) {
            return bad("request contains non-finite numbers".into());
        }
        let d = self.saliency.d_obs();
        if self.saliency.top_k.iter().any(|f| f.dim >= d) {
            return bad("salient dimension out of range".into());
        }
        Ok(())
    }
}

fn name_of(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("obs_{i}"))
}

/// Steps per bucket so that `len` steps fit in `max_rows` rows.
pub fn bucket_size(len: usize, max_rows: usize) -> usize {
    len.div_ceil(max_rows.max(1)).max(1)
}

/// Max |x| over consecutive buckets of `size`.
pub fn pool_max_abs(xs: &[f64], size: usize) -> Vec<f64> {
    xs.chunks(size.max(1))
        .map(|c| c.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
        .collect()
}

/// Signed value of largest magnitude in each bucket.
pub fn pool_extreme(xs: &[f64], size: usize) -> Vec<f64> {
    xs.chunks(size.max(1))
        .map(|c| c.iter().copied().fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m }))
        .collect()
}

pub const BLOCK_BEGIN: &str = "BEGIN_RANKED";
pub const BLOCK_END: &str = "END_RANKED";

/// Deterministic text rendering of a request.
pub fn build_prompt(req: &DiagnosisRequest) -> Result<String, DiagnosisError> {
    req.validate()?;
    let names = &req.channel_names;
    let map = &req.saliency;
    let mut p = String::new();
    let w = &mut p;
    writeln!(w, "You are helping an operator find the root cause of an anomaly detected on a robot.").unwrap();
    writeln!(w, "Incident: {}", req.incident_id).unwrap();
    writeln!(w).unwrap();
    writeln!(w, "## Failure categories (taxonomy {})", req.taxonomy.version).unwrap();
    for c in &req.taxonomy.categories {
        writeln!(w, "- {} : {}. {}", c.id, c.name, c.description).unwrap();
    }
    writeln!(w).unwrap();

    let g = &req.gates;
    writeln!(w, "## Detector gates at step {}", g.step).unwrap();
    writeln!(
        w,
        "gate1 per-channel likelihood: fired={} channel={} margin={:.4}",
        g.gate1_fired,
        name_of(names, g.gate1_dim),
        g.gate1_margin
    )
    .unwrap();
    writeln!(w, "gate2 mean likelihood: fired={} margin={:.4}", g.gate2_fired, g.gate2_margin).unwrap();
    let viol: Vec<String> = g.gate3_violations.iter().map(|&i| name_of(names, i)).collect();
    writeln!(w, "gate3 range box: fired={} violations=[{}]", g.gate3_fired, viol.join(", ")).unwrap();
    writeln!(w).unwrap();

    writeln!(w, "## Most salient channels over steps {}..{}", map.window_start, map.window_end).unwrap();
    for (r, f) in map.top_k.iter().enumerate() {
        writeln!(w, "{}. {} (dim {}) max|attribution|={:.4e}", r + 1, name_of(names, f.dim), f.dim, f.score).unwrap();
    }
    writeln!(w).unwrap();

    let size = bucket_size(map.window_len(), MAX_ROWS);
    let dims: Vec<usize> = map.top_k.iter().map(|f| f.dim).collect();
    let header: Vec<String> = dims.iter().map(|&i| name_of(names, i)).collect();
    writeln!(w, "## Saliency (max |attribution| per {size}-step bucket)").unwrap();
    writeln!(w, "start,{}", header.join(",")).unwrap();
    let cols: Vec<Vec<f64>> = dims
        .iter()
        .map(|&i| {
            let col: Vec<f64> = map.attributions.iter().map(|r| r[i]).collect();
            pool_max_abs(&col, size)
        })
        .collect();
    table(w, map.window_start, size, &cols, sci);

    writeln!(w, "## Raw trails of salient channels (largest-magnitude value per bucket)").unwrap();
    writeln!(w, "start,{}", req.trails.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(",")).unwrap();
    let cols: Vec<Vec<f64>> = req.trails.iter().map(|t| pool_extreme(&t.values, size)).collect();
    table(w, map.window_start, size, &cols, fixed);

    if !req.commanded.is_empty() {
        writeln!(w, "## Commanded values").unwrap();
        writeln!(w, "start,{}", req.commanded.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(",")).unwrap();
        let cols: Vec<Vec<f64>> = req.commanded.iter().map(|t| pool_extreme(&t.values, size)).collect();
        table(w, map.window_start, size, &cols, fixed);
    }
    if let Some(img) = &req.image {
        writeln!(w, "## Attached key-frame: {} ({})", img.uri, img.media_type).unwrap();
        writeln!(w).unwrap();
    }

    writeln!(w, "## Answer format").unwrap();
    writeln!(
        w,
        "Return exactly three ranked categories, most likely first, using only ids from the taxonomy, \
         each with a one-sentence rationale, in this block and nothing else:"
    )
    .unwrap();
    writeln!(w, "{BLOCK_BEGIN}").unwrap();
    for r in 1..=3 {
        writeln!(w, "RANKED: {r} | <category id> | <high|medium|low> | <rationale>").unwrap();
    }
    writeln!(w, "{BLOCK_END}").unwrap();
    Ok(p)
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

fn table(w: &mut String, start: usize, size: usize, cols: &[Vec<f64>], fmt: fn(f64) -> String) {
    let rows = cols.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..rows {
        write!(w, "{}", start + r * size).unwrap();
        for c in cols {
            w.push(',');
            if let Some(&v) = c.get(r) {
                w.push_str(&fmt(v));
            }
        }
        w.push('\n');
    }
    w.push('\n');
}
