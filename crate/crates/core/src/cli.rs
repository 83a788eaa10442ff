//! Batch command-line front end. Each `cmd_*` function reads its inputs
//! from the paths in a [`RunConfig`], writes its artifacts, and returns a
//! JSON summary that the binary prints to stdout.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{mode_name, RunConfig};
use crate::data::{self, extract_car_following, load_tracks_csv, synth_naturalistic};
use crate::error::{Error, Result};
use crate::estimator::{compare_reports, required_n, write_trace_csv, EstimationReport, PlannerInput};
use crate::model::{NaturalisticModel, ProposalModel};
use crate::pipeline::{fit_naturalistic, run_estimate, train_proposal, Mode, ScenarioSource};
use crate::sampler::TrimFlowSampler;
use crate::scenario::{fmt_f64, DataSummary};

#[derive(Debug, Parser)]
#[command(name = "rareflow", version, about = "Collision-rate estimation with flow-based importance sampling")]
pub struct Cli {
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set gmm.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load track data (or synthesize it) into a samples CSV and a summary.
    Ingest,
    /// Fit the naturalistic mixture to the samples.
    Fit,
    /// Train the two proposal flows.
    Train,
    /// Run crude or importance-sampled rollouts.
    Estimate(EstimateArgs),
    /// Rollouts needed for a target relative half-width under crude sampling.
    Plan(PlanArgs),
    /// Compare a crude and a trimflow report.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Crude,
    Trimflow,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Crude => Mode::Crude,
            ModeArg::Trimflow => Mode::Trimflow,
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Fixed rollout count.
    #[arg(long, conflicts_with = "omega_target")]
    pub n: Option<u64>,
    /// Stop once the relative half-width falls below this.
    #[arg(long)]
    pub omega_target: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub crude: Option<PathBuf>,
    #[arg(long)]
    pub trimflow: Option<PathBuf>,
}

/// Runs a parsed command line and returns its JSON summary.
pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if cfg.workers > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    match &cli.command {
        Command::Ingest => cmd_ingest(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Estimate(a) => cmd_estimate(&cfg, a.mode.into(), a.n, a.omega_target),
        Command::Plan(a) => cmd_plan(&cfg, a.p, a.b, a.beta),
        Command::Compare(a) => cmd_compare(&cfg, a.crude.as_deref(), a.trimflow.as_deref()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in losses.iter().enumerate() {
        w.write_record([e.to_string(), fmt_f64(*l)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Value> {
    let (samples, source) = match &cfg.paths.data_in {
        Some(path) => {
            let tracks = load_tracks_csv(path, &cfg.columns)?;
            if tracks.malformed > 0 {
                log::warn!("skipped {} malformed track rows", tracks.malformed);
            }
            (extract_car_following(&tracks, &cfg.extract)?, path.display().to_string())
        }
        None => (synth_naturalistic(&cfg.synth)?.samples, "synthetic".to_string()),
    };
    let summary = DataSummary::from_samples(&samples)?;
    ensure_dir(&cfg.paths.data_dir)?;
    data::save_samples(&samples, &cfg.paths.samples())?;
    data::save_summary(&summary, &cfg.paths.summary())?;
    Ok(json!({
        "source": source,
        "samples": samples.len(),
        "samples_path": cfg.paths.samples(),
        "summary_path": cfg.paths.summary(),
    }))
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Value> {
    let samples = data::load_samples(&cfg.paths.samples())?;
    let (nat, fit) = fit_naturalistic(&samples, &cfg.gmm)?;
    ensure_dir(&cfg.paths.models_out)?;
    nat.save(&cfg.paths.naturalistic(), &cfg.paths.gmm())?;
    let report = json!({
        "K": cfg.gmm.k,
        "samples": samples.len(),
        "iterations": fit.iterations,
        "mean_log_likelihood": fit.mean_log_likelihood,
        "em_trace": fit.trace,
        "log_box_mass": nat.log_box_mass(),
    });
    write_json(&cfg.paths.fit_report(), &report)?;
    Ok(report)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let nat = NaturalisticModel::load(&cfg.paths.naturalistic())?;
    let (proposal, traces) = train_proposal(&nat, &cfg.flow, &cfg.train, &cfg.training_set)?;
    ensure_dir(&cfg.paths.models_out)?;
    proposal.save(&cfg.paths.proposal(), &cfg.paths.joint_flow(), &cfg.paths.state_flow())?;
    write_loss_csv(&cfg.paths.joint_loss(), &traces.joint)?;
    write_loss_csv(&cfg.paths.state_loss(), &traces.state)?;
    Ok(json!({
        "epochs": cfg.train.epochs,
        "final_loss_joint": traces.joint.last(),
        "final_loss_state": traces.state.last(),
        "log_box_mass": proposal.log_box_mass(),
        "proposal_path": cfg.paths.proposal(),
    }))
}

pub fn cmd_estimate(cfg: &RunConfig, mode: Mode, n: Option<u64>, omega_target: Option<f64>) -> Result<Value> {
    let mut est = cfg.estimate;
    if let Some(n) = n {
        est.n = n;
        est.omega_target = None;
    }
    if omega_target.is_some() {
        est.omega_target = omega_target;
    }
    let nat = NaturalisticModel::load(&cfg.paths.naturalistic())?;
    let env = cfg.rollout_env();
    let proposal;
    let source = match mode {
        Mode::Crude => ScenarioSource::Crude(&nat),
        Mode::Trimflow => {
            proposal = ProposalModel::load(&cfg.paths.proposal())?;
            ScenarioSource::TrimFlow(TrimFlowSampler::new(&nat, &proposal, cfg.sampler)?)
        }
    };
    let out = run_estimate(&source, &env, &est, &cfg.risk, cfg.seed)?;
    let mut report = out.report.clone();
    let wall_clock = report.wall_clock_s.take();
    ensure_dir(&cfg.paths.reports_out)?;
    write_json(&cfg.paths.report(mode), &report)?;
    write_trace_csv(&out.trace, fs::File::create(cfg.paths.trace(mode))?)?;
    let diagnostics = json!({
        "mode": mode_name(mode),
        "diagnostics": out.diagnostics(),
        "sampler": {
            "steps": out.sampler.steps,
            "candidates": out.sampler.candidates,
            "violations": out.sampler.violations,
            "initial_draws": out.sampler.initial_draws,
        },
        "wall_clock_s": wall_clock,
    });
    write_json(&cfg.paths.diagnostics(mode), &diagnostics)?;
    let (lo, hi) = report.confidence_interval();
    Ok(json!({
        "mode": mode_name(mode),
        "report": report,
        "confidence_interval": [lo, hi],
        "diagnostics": out.diagnostics(),
        "wall_clock_s": wall_clock,
    }))
}

pub fn cmd_plan(cfg: &RunConfig, p: Option<f64>, b: Option<f64>, beta: Option<f64>) -> Result<Value> {
    let input = PlannerInput {
        p: p.unwrap_or(cfg.plan.p),
        b: b.unwrap_or(cfg.plan.b),
        beta: beta.unwrap_or(cfg.plan.beta),
    };
    let n = required_n(&input)?;
    Ok(json!({ "p": input.p, "b": input.b, "beta": input.beta, "required_n": n }))
}

fn load_report(path: &Path) -> Result<EstimationReport> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn cmd_compare(cfg: &RunConfig, crude: Option<&Path>, trimflow: Option<&Path>) -> Result<Value> {
    let crude_path = crude.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.report(Mode::Crude));
    let trim_path = trimflow
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.report(Mode::Trimflow));
    let cmp = compare_reports(&load_report(&crude_path)?, &load_report(&trim_path)?)?;
    ensure_dir(&cfg.paths.reports_out)?;
    write_json(&cfg.paths.comparison(), &cmp)?;
    Ok(serde_json::to_value(&cmp)?)
}
