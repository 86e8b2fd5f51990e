//! Synthetic multi-joint telemetry, labeled fault injection and detection
//! benchmarks.

mod bench;
mod fault;
mod metrics;
mod world;

pub use bench::{
    benchmark_episodes, run_benchmark, summarize_episodes, BenchConfig, Counts, DelayStats,
    EpisodeRecord, EvalReport, KindReport, Method, MethodReport,
};
pub use fault::{
    fault_labels, inject_episode_fault, inject_fault, FaultKind, FaultSpec, FaultSuite,
    KindMagnitudes,
};
pub use metrics::{auroc, fpr_at, tpr_at_episodic_fpr};
pub use world::{generate_nominal, Episode, EpisodeParams, World, WorldConfig};
