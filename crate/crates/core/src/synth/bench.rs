use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::fault::{inject_episode_fault, FaultKind, FaultSpec, FaultSuite};
use super::metrics::{auroc, fpr_at, tpr_at_episodic_fpr};
use super::world::{World, WorldConfig};
use crate::detect::{detect_episode, CalibrationProfile, EpisodeVerdict, GateScores};
use crate::error::{RaptError, Result};
use crate::model::InferenceModel;
use crate::par::ExecMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_nominal: usize,
    pub n_faulted: usize,
    /// First world episode index used by the benchmark; keep it clear of the
    /// training and calibration indices.
    pub first_episode: u64,
    pub fpr_budget: f64,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_nominal: 200,
            n_faulted: 200,
            first_episode: 1_000_000,
            fpr_budget: 0.005,
            seed: 11,
            exec: ExecMode::default(),
        }
    }
}

/// Which episode score a threshold sweep uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// All three gates (the deployed detector).
    Hybrid,
    /// Per-dimension max gate alone.
    Gate1Max,
    /// Mean gate alone.
    Gate2Mean,
    /// Raw range box alone.
    Gate3Box,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Hybrid, Method::Gate1Max, Method::Gate2Mean, Method::Gate3Box];

    pub fn score(self, g: &GateScores) -> f64 {
        // Gates that were never live rank below every live score.
        let live = |x: Option<f64>| x.unwrap_or(f64::MIN);
        match self {
            Method::Hybrid => g.max(),
            Method::Gate1Max => live(g.gate1),
            Method::Gate2Mean => live(g.gate2),
            Method::Gate3Box => g.gate3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: u64,
    pub fault: Option<FaultSpec>,
    pub flagged: bool,
    pub first_detection: Option<usize>,
    pub score: f64,
    pub gate_scores: GateScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub auroc: Option<f64>,
    pub tpr_at_fpr: Option<f64>,
    /// `None` when the budget admits every nominal episode.
    pub threshold: Option<f64>,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: FaultKind,
    pub episodes: usize,
    pub auroc: Option<f64>,
    /// Hybrid score above the budget threshold.
    pub tpr_at_fpr: Option<f64>,
    /// Binary detector flag rate.
    pub flagged_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: i64,
    pub max: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr_budget: f64,
    pub n_nominal: usize,
    pub n_faulted: usize,
    pub methods: Vec<MethodReport>,
    /// Same sweep restricted to single-channel faults.
    pub single_channel: Vec<MethodReport>,
    pub per_kind: Vec<KindReport>,
    /// Mean of the per-kind AUROCs.
    pub mean_kind_auroc: Option<f64>,
    /// First flagged step minus onset over binary true positives.
    pub delay: Option<DelayStats>,
    /// Binary detector flags (any gate fired in the episode).
    pub counts: Counts,
    pub episodes: Vec<EpisodeRecord>,
}

fn sweep(method: Method, nominal: &[&EpisodeRecord], faulted: &[&EpisodeRecord], budget: f64) -> Result<MethodReport> {
    let ns: Vec<f64> = nominal.iter().map(|r| method.score(&r.gate_scores)).collect();
    let fs: Vec<f64> = faulted.iter().map(|r| method.score(&r.gate_scores)).collect();
    let (tpr, thr) = tpr_at_episodic_fpr(&ns, &fs, budget)?;
    let auroc = if fs.is_empty() {
        None
    } else {
        let labels: Vec<bool> = ns.iter().map(|_| false).chain(fs.iter().map(|_| true)).collect();
        let scores: Vec<f64> = ns.iter().chain(&fs).copied().collect();
        Some(auroc(&scores, &labels)?)
    };
    Ok(MethodReport {
        method,
        auroc,
        tpr_at_fpr: tpr,
        threshold: thr.is_finite().then_some(thr),
        fpr: fpr_at(&ns, thr),
    })
}

fn delay_stats(mut d: Vec<i64>) -> Option<DelayStats> {
    if d.is_empty() {
        return None;
    }
    d.sort_unstable();
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2] as f64
    } else {
        (d[n / 2 - 1] + d[n / 2]) as f64 / 2.0
    };
    Some(DelayStats {
        count: n,
        mean: d.iter().sum::<i64>() as f64 / n as f64,
        median,
        min: d[0],
        max: d[n - 1],
    })
}

/// Builds the report from scored episode records.
pub fn summarize_episodes(records: Vec<EpisodeRecord>, budget: f64) -> Result<EvalReport> {
    let nominal: Vec<&EpisodeRecord> = records.iter().filter(|r| r.fault.is_none()).collect();
    let faulted: Vec<&EpisodeRecord> = records.iter().filter(|r| r.fault.is_some()).collect();
    if nominal.is_empty() {
        return Err(RaptError::Input("benchmark needs at least one nominal episode".into()));
    }
    let methods = Method::ALL
        .iter()
        .map(|&m| sweep(m, &nominal, &faulted, budget))
        .collect::<Result<Vec<_>>>()?;
    let single: Vec<&EpisodeRecord> = faulted
        .iter()
        .copied()
        .filter(|r| r.fault.as_ref().is_some_and(|f| f.channels.len() == 1))
        .collect();
    let single_channel = Method::ALL
        .iter()
        .map(|&m| sweep(m, &nominal, &single, budget))
        .collect::<Result<Vec<_>>>()?;

    let mut kinds: Vec<FaultKind> = faulted.iter().filter_map(|r| r.fault.as_ref().map(|f| f.kind)).collect();
    kinds.sort();
    kinds.dedup();
    let mut per_kind = Vec::new();
    for kind in kinds {
        let of_kind: Vec<&EpisodeRecord> = faulted
            .iter()
            .copied()
            .filter(|r| r.fault.as_ref().is_some_and(|f| f.kind == kind))
            .collect();
        let m = sweep(Method::Hybrid, &nominal, &of_kind, budget)?;
        per_kind.push(KindReport {
            kind,
            episodes: of_kind.len(),
            auroc: m.auroc,
            tpr_at_fpr: m.tpr_at_fpr,
            flagged_rate: of_kind.iter().filter(|r| r.flagged).count() as f64 / of_kind.len() as f64,
        });
    }
    let aurocs: Vec<f64> = per_kind.iter().filter_map(|k| k.auroc).collect();
    let mean_kind_auroc = (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64);

    let tp = faulted.iter().filter(|r| r.flagged).count();
    let fp = nominal.iter().filter(|r| r.flagged).count();
    let counts = Counts {
        tp,
        fp,
        tn: nominal.len() - fp,
        fn_: faulted.len() - tp,
    };
    let delays = faulted
        .iter()
        .filter_map(|r| Some(r.first_detection? as i64 - r.fault.as_ref()?.onset as i64))
        .collect();
    Ok(EvalReport {
        fpr_budget: budget,
        n_nominal: nominal.len(),
        n_faulted: faulted.len(),
        methods,
        single_channel,
        per_kind,
        mean_kind_auroc,
        delay: delay_stats(delays),
        counts,
        episodes: records,
    })
}

fn record(index: u64, fault: Option<FaultSpec>, v: &EpisodeVerdict) -> EpisodeRecord {
    EpisodeRecord {
        index,
        fault,
        flagged: v.flagged,
        first_detection: v.first_detection,
        score: v.score,
        gate_scores: v.gate_scores,
    }
}

/// Nominal and faulted episode sets for a benchmark run. Faulted episodes
/// are injected into their own nominal twins.
pub fn benchmark_episodes(
    world: &World,
    suite: &FaultSuite,
    cfg: &BenchConfig,
) -> Result<Vec<(u64, Option<FaultSpec>)>> {
    let faults = suite.draw(world, cfg.n_faulted, cfg.seed)?;
    let nominal = (0..cfg.n_nominal as u64).map(|i| (cfg.first_episode + i, None));
    let twin0 = cfg.first_episode + cfg.n_nominal as u64;
    let faulted = faults
        .into_iter()
        .enumerate()
        .map(|(i, f)| (twin0 + i as u64, Some(f)));
    Ok(nominal.chain(faulted).collect())
}

/// Generates, injects and scores the benchmark, then summarizes it.
pub fn run_benchmark<F: Float + Send + Sync>(
    model: &InferenceModel<F>,
    profile: &CalibrationProfile,
    world_cfg: &WorldConfig,
    suite: &FaultSuite,
    cfg: &BenchConfig,
) -> Result<EvalReport> {
    let world = World::new(world_cfg.clone())?;
    if world_cfg.d_obs() != model.d_obs() {
        return Err(RaptError::Input(format!(
            "world emits {} dims but the model observes {}",
            world_cfg.d_obs(),
            model.d_obs()
        )));
    }
    let plan = benchmark_episodes(&world, suite, cfg)?;
    let records = cfg
        .exec
        .map(&plan, |(index, fault)| -> Result<EpisodeRecord> {
            let ep = world.episode(*index);
            let log = match fault {
                Some(f) => inject_episode_fault(&world, &ep, f)?.0,
                None => ep.log,
            };
            let v = detect_episode(model, profile, &log)?;
            Ok(record(*index, fault.clone(), &v))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    summarize_episodes(records, cfg.fpr_budget)
}
