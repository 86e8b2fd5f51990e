//! `rapt`: generate data, train, calibrate, monitor, evaluate, explain and
//! diagnose. Exit codes: 0 nominal, 2 anomaly detected, 1 error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rapt_core::detect::{calibrate, detect, summarize, CalibrationProfile};
use rapt_core::diagnosis::{
    classify_offline, diagnose, format_ranked_block, DiagnosisRequest, FailureTaxonomy, HttpTransport, MockTransport,
    Transport,
};
use rapt_core::io::{load_checkpoint, load_trajectory, save_checkpoint, save_trajectory, Dtype, RunConfig};
use rapt_core::model::RaptModel;
use rapt_core::saliency::{emit_heatmap, saliency_at};
use rapt_core::synth::{benchmark_episodes, inject_episode_fault, run_benchmark, FaultSpec, World, WorldConfig};
use rapt_core::train::{init_model, train_with};
use rapt_core::TrajectoryLog;

#[derive(Parser)]
#[command(name = "rapt", version, about = "Probabilistic trajectory anomaly monitor")]
struct Cli {
    /// Run config (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write nominal training episodes, the calibration run and faulted episodes as CSV.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every CSV in a directory; writes a checkpoint and a JSON report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
    /// Fit thresholds on a nominal calibration run.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Nominal training CSVs; widen the gate-3 box.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trajectory as a stream; one JSON verdict per line, then a summary.
    Monitor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Verdict lines go here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the synthetic fault benchmark and write an evaluation report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrated-gradients saliency for the window ending at a step.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Window end; defaults to the first detection (needs --profile) or the last step.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Output stem: writes <stem>.json, <stem>.csv and <stem>.svg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank failure categories for the first detection in a log.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Answer through an in-process mock endpoint instead of HTTP.
        #[arg(long)]
        mock: bool,
        /// Use the offline heuristic even when an endpoint is configured.
        #[arg(long, conflicts_with = "mock")]
        offline: bool,
        #[arg(long, default_value = "incident")]
        incident: String,
    },
}

#[derive(Serialize)]
struct FaultLabel {
    file: String,
    episode: u64,
    fault: FaultSpec,
    /// Labeled steps `[onset, end)`.
    steps: [usize; 2],
}

#[derive(Serialize)]
struct MonitorSummary {
    steps: usize,
    anomalies: usize,
    flagged: bool,
    first_detection: Option<usize>,
    score: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_log(path: &Path) -> Result<TrajectoryLog> {
    load_trajectory(path).with_context(|| format!("reading trajectory {}", path.display()))
}

fn read_model(path: &Path) -> Result<RaptModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_profile(path: &Path) -> Result<CalibrationProfile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading profile {}", path.display()))?;
    let p: CalibrationProfile = serde_json::from_str(&text).context("parsing calibration profile")?;
    p.validate()?;
    Ok(p)
}

fn read_dir_logs(dir: &Path) -> Result<Vec<TrajectoryLog>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    files.sort();
    if files.is_empty() {
        bail!("no .csv trajectories in {}", dir.display());
    }
    files.iter().map(|p| read_log(p)).collect()
}

fn check_layout(model: &RaptModel, profile: &CalibrationProfile, log: Option<&TrajectoryLog>) -> Result<()> {
    let d = model.config.d_obs;
    if profile.d_obs() != d {
        bail!("profile covers {} dims but the model observes {d}", profile.d_obs());
    }
    if let Some(l) = log {
        if l.d_obs() != d {
            bail!("trajectory has {} observation columns but the model observes {d}", l.d_obs());
        }
    }
    Ok(())
}

/// World channel names when the config's world matches the model width.
fn channel_names(world: &WorldConfig, d_obs: usize) -> Vec<String> {
    if world.d_obs() == d_obs {
        world.channel_names()
    } else {
        (0..d_obs).map(|i| format!("obs_{i}")).collect()
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Gen { out } => cmd_gen(&cfg, &out),
        Cmd::Train {
            data,
            out,
            report,
            dtype,
        } => cmd_train(&cfg, &data, &out, report.as_deref(), dtype),
        Cmd::Calibrate { model, run, data, out } => cmd_calibrate(&cfg, &model, &run, data.as_deref(), &out),
        Cmd::Monitor {
            model,
            profile,
            log,
            out,
        } => cmd_monitor(&model, &profile, &log, out.as_deref()),
        Cmd::Eval { model, profile, out } => cmd_eval(&cfg, &model, &profile, &out),
        Cmd::Saliency {
            model,
            log,
            step,
            profile,
            out,
        } => cmd_saliency(&cfg, &model, &log, step, profile.as_deref(), &out),
        Cmd::Diagnose {
            model,
            profile,
            log,
            out,
            mock,
            offline,
            incident,
        } => cmd_diagnose(&cfg, &model, &profile, &log, &out, mock, offline, &incident),
    }
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let world = World::new(cfg.world.clone())?;
    let nominal_dir = out.join("nominal");
    let faulted_dir = out.join("faulted");
    fs::create_dir_all(&nominal_dir)?;
    fs::create_dir_all(&faulted_dir)?;
    for i in 0..cfg.train_episodes {
        save_trajectory(&world.episode(i as u64).log, &nominal_dir.join(format!("ep_{i:06}.csv")))?;
    }
    let cal_world = World::new(WorldConfig {
        episode_len: cfg.calibration_len,
        ..cfg.world.clone()
    })?;
    save_trajectory(
        &cal_world.episode(cfg.calibration_episode as u64).log,
        &out.join("calibration.csv"),
    )?;
    let mut labels = Vec::new();
    for (index, fault) in benchmark_episodes(&world, &cfg.suite, &cfg.bench)? {
        let Some(spec) = fault else { continue };
        let (log, _) = inject_episode_fault(&world, &world.episode(index), &spec)?;
        let file = format!("ep_{index}_{}.csv", spec.kind.as_str());
        save_trajectory(&log, &faulted_dir.join(&file))?;
        labels.push(FaultLabel {
            file: format!("faulted/{file}"),
            episode: index,
            steps: [spec.onset, spec.end()],
            fault: spec,
        });
    }
    write_json(&out.join("labels.json"), &labels)?;
    eprintln!(
        "wrote {} nominal, 1 calibration and {} faulted episodes to {}",
        cfg.train_episodes,
        labels.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, report: Option<&Path>, dtype: DtypeArg) -> Result<ExitCode> {
    let logs = read_dir_logs(data)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.d_obs = logs[0].d_obs();
    let model = init_model(&logs, model_cfg, cfg.train.seed)?;
    eprintln!("training {} parameters on {} trajectories", model.param_count(), logs.len());
    let (model, rep) = train_with(model, &logs, &cfg.train, |e| {
        let held = e.heldout_nll.map(|h| format!(" heldout {h:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3}  nll {:.4}{held}  lr {:.2e}  {:.1}s", e.epoch + 1, e.train_nll, e.lr, e.seconds);
    })?;
    let dtype = match dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    save_checkpoint(&model, out, dtype).with_context(|| format!("writing checkpoint {}", out.display()))?;
    if let Some(p) = report {
        write_json(p, &rep)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(cfg: &RunConfig, model: &Path, run: &Path, data: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let model = read_model(model)?;
    let run = read_log(run)?;
    let training = match data {
        Some(d) => read_dir_logs(d)?,
        None => Vec::new(),
    };
    let profile = calibrate(&model.inference::<f32>(), &run, &training, &cfg.calibration)?;
    write_json(out, &profile)?;
    eprintln!(
        "calibrated on {} steps: global threshold {:.4}",
        profile.calibration_steps,
        profile.global_threshold()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_monitor(model: &Path, profile: &Path, log: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let model = read_model(model)?;
    let profile = read_profile(profile)?;
    let log = read_log(log)?;
    check_layout(&model, &profile, Some(&log))?;
    let inf = model.inference::<f32>();
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut state = inf.new_state();
    let mut verdicts = Vec::with_capacity(log.len());
    for t in 0..log.len() {
        let v = detect(&inf, &profile, &mut state, log.obs(t), log.action(t))?;
        serde_json::to_writer(&mut sink, &v)?;
        sink.write_all(b"\n")?;
        verdicts.push(v);
    }
    let anomalies = verdicts.iter().filter(|v| v.anomaly).count();
    let ep = summarize(verdicts);
    let summary = MonitorSummary {
        steps: log.len(),
        anomalies,
        flagged: ep.flagged,
        first_detection: ep.first_detection,
        score: ep.score,
    };
    serde_json::to_writer(&mut sink, &serde_json::json!({ "summary": summary }))?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(if ep.flagged { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_eval(cfg: &RunConfig, model: &Path, profile: &Path, out: &Path) -> Result<ExitCode> {
    let model = read_model(model)?;
    let profile = read_profile(profile)?;
    check_layout(&model, &profile, None)?;
    let report = run_benchmark(&model.inference::<f32>(), &profile, &cfg.world, &cfg.suite, &cfg.bench)?;
    write_json(out, &report)?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    for m in &report.methods {
        eprintln!("{:<8} auroc {}  tpr@fpr {}", format!("{:?}", m.method), fmt(m.auroc), fmt(m.tpr_at_fpr));
    }
    eprintln!("mean per-kind auroc {}", fmt(report.mean_kind_auroc));
    Ok(ExitCode::SUCCESS)
}

fn first_detection(model: &RaptModel, profile: &CalibrationProfile, log: &TrajectoryLog) -> Result<Option<usize>> {
    check_layout(model, profile, Some(log))?;
    let inf = model.inference::<f32>();
    Ok(rapt_core::detect::detect_episode(&inf, profile, log)?.first_detection)
}

fn cmd_saliency(
    cfg: &RunConfig,
    model: &Path,
    log: &Path,
    step: Option<usize>,
    profile: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let model = read_model(model)?;
    let log = read_log(log)?;
    if log.is_empty() {
        bail!("empty trajectory");
    }
    let t_end = match (step, profile) {
        (Some(t), _) => t,
        (None, Some(p)) => first_detection(&model, &read_profile(p)?, &log)?.unwrap_or(log.len() - 1),
        (None, None) => log.len() - 1,
    };
    cfg.saliency.validate()?;
    let map = saliency_at(&model, &log, t_end, &cfg.saliency)?;
    let names = channel_names(&cfg.world, model.config.d_obs);
    write_json(&out.with_extension("json"), &map)?;
    emit_heatmap(&map, out, Some(&names))?;
    for f in &map.top_k {
        eprintln!("{:<10} {:.4e}", names[f.dim], f.score);
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    cfg: &RunConfig,
    model: &Path,
    profile: &Path,
    log: &Path,
    out: &Path,
    mock: bool,
    offline: bool,
    incident: &str,
) -> Result<ExitCode> {
    let model = read_model(model)?;
    let profile = read_profile(profile)?;
    let log = read_log(log)?;
    check_layout(&model, &profile, Some(&log))?;
    let ep = rapt_core::detect::detect_episode(&model.inference::<f32>(), &profile, &log)?;
    let Some(t) = ep.first_detection else {
        eprintln!("no anomaly detected; nothing to diagnose");
        return Ok(ExitCode::SUCCESS);
    };
    cfg.saliency.validate()?;
    let map = saliency_at(&model, &log, t, &cfg.saliency)?;
    let req = DiagnosisRequest::from_parts(
        incident,
        &log,
        map,
        &ep.verdicts[t],
        channel_names(&cfg.world, model.config.d_obs),
        FailureTaxonomy::default(),
    );
    let transport: Option<Box<dyn Transport>> = if mock {
        // The mock answers with the heuristic ranking in endpoint format.
        let ranked = classify_offline(&req)?;
        let ids: Vec<String> = ranked.ranked_ids().iter().map(|s| s.to_string()).collect();
        Some(Box::new(MockTransport::from_fn(move |_| {
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            format_ranked_block(&refs)
        })))
    } else if offline {
        None
    } else {
        HttpTransport::from_config(&cfg.endpoint).map(|h| Box::new(h) as Box<dyn Transport>)
    };
    let report = diagnose(&req, &cfg.endpoint, transport.as_deref())?;
    write_json(out, &report)?;
    for (i, h) in report.hypotheses.iter().enumerate() {
        eprintln!("{}. {} ({})", i + 1, h.category, h.confidence);
    }
    Ok(ExitCode::SUCCESS)
}
