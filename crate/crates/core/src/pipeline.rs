//! End-to-end orchestration: fitting the naturalistic model, building the
//! risk-weighted training set, training the proposal flows, and running
//! crude or importance-sampled rollouts in parallel.
//!
//! Rollout `i` always uses stream `i` of a generator seeded with the run
//! seed, and partial results are folded in index order, so outputs do not
//! depend on the number of worker threads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{scenario_log_ratio, weight_from_log, Accumulator, EstimationReport, TracePoint};
use crate::flow::{train_flow, Flow, FlowArch, TrainConfig};
use crate::gmm::{fit_gmm, GmmConfig, GmmFit};
use crate::model::{NaturalisticModel, ProposalModel, DEFAULT_BOX_SAMPLES};
use crate::risk::{self, RiskConfig};
use crate::sampler::{SamplerStats, TrimFlowSampler};
use crate::scenario::{
    fit_normalizer, joint_rows, DataSummary, Maneuver, Scenario, Scene, JOINT_DIM, SCENE_DIM, SCENE_INDICES,
};
use crate::sim::{rollout, IdmParams, SimConfig};

/// Generator for rollout `index` of a run seeded with `seed`.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Fits the z-score normalizer and the joint GMM to naturalistic samples.
pub fn fit_naturalistic(samples: &[(Scene, Maneuver)], cfg: &GmmConfig) -> Result<(NaturalisticModel, GmmFit)> {
    let summary = DataSummary::from_samples(samples)?;
    let rows = joint_rows(samples);
    let normalizer = fit_normalizer(&rows)?;
    let z: Vec<Vec<f64>> = rows.iter().map(|r| normalizer.normalize(r)).collect::<Result<_>>()?;
    let fit = fit_gmm(&z, cfg)?;
    let model = NaturalisticModel::new(normalizer, fit.model.clone(), summary, DEFAULT_BOX_SAMPLES, cfg.seed)?;
    Ok((model, fit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSetConfig {
    /// Draws from the naturalistic model before dropping zero weights.
    pub n_samples: usize,
    /// Lower bound applied to every risk weight; 0 keeps the pure
    /// `e^{-ttc}` weighting and drops non-closing scenes.
    pub weight_floor: f64,
    pub seed: u64,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            weight_floor: 0.0,
            seed: 11,
        }
    }
}

/// Risk-weighted samples for the two proposal flows, in z-scored
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub joint: Vec<Vec<f64>>,
    pub state: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Draws dropped because their weight was zero.
    pub dropped: usize,
}

pub fn build_training_set(nat: &NaturalisticModel, cfg: &TrainingSetConfig) -> Result<TrainingSet> {
    if !(0.0..=1.0).contains(&cfg.weight_floor) {
        return Err(Error::InvalidConfig("weight_floor must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = TrainingSet {
        joint: Vec::new(),
        state: Vec::new(),
        weights: Vec::new(),
        dropped: 0,
    };
    for _ in 0..cfg.n_samples {
        let z = nat.joint().sample(&mut rng);
        let z_s: Vec<f64> = SCENE_INDICES.iter().map(|&i| z[i]).collect();
        let scene = nat.denormalize_scene(&z_s)?;
        let w = risk::risk_weight(&scene).max(cfg.weight_floor);
        if w > 0.0 {
            set.joint.push(z);
            set.state.push(z_s);
            set.weights.push(w);
        } else {
            set.dropped += 1;
        }
    }
    if set.weights.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(set)
}

/// Loss traces of the two proposal flows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalTraces {
    pub joint: Vec<f64>,
    pub state: Vec<f64>,
}

pub fn train_proposal(
    nat: &NaturalisticModel,
    arch: &FlowArch,
    train: &TrainConfig,
    set_cfg: &TrainingSetConfig,
) -> Result<(ProposalModel, ProposalTraces)> {
    let set = build_training_set(nat, set_cfg)?;
    log::info!(
        "training proposal flows on {} weighted samples ({} dropped)",
        set.weights.len(),
        set.dropped
    );
    let mut init = ChaCha8Rng::seed_from_u64(train.seed);
    let mut joint = Flow::new(JOINT_DIM, arch, &mut init)?;
    let mut state = Flow::new(SCENE_DIM, arch, &mut init)?;
    let joint_trace = train_flow(&mut joint, &set.joint, &set.weights, train)?;
    let state_trace = train_flow(
        &mut state,
        &set.state,
        &set.weights,
        &TrainConfig {
            seed: train.seed.wrapping_add(1),
            ..*train
        },
    )?;
    let proposal = ProposalModel::new(joint, state, nat, DEFAULT_BOX_SAMPLES, train.seed)?;
    Ok((
        proposal,
        ProposalTraces {
            joint: joint_trace,
            state: state_trace,
        },
    ))
}

/// What a single rollout contributes to an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOutcome {
    pub log_ratio: f64,
    pub collided: bool,
    pub min_ttc: f64,
}

/// Samples scenarios from either the naturalistic law or the proposal.
pub enum ScenarioSource<'a> {
    Crude(&'a NaturalisticModel),
    TrimFlow(TrimFlowSampler<'a>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutEnv {
    pub sim: SimConfig,
    pub idm: IdmParams,
    pub max_rejections: usize,
}

impl ScenarioSource<'_> {
    /// Scenario `index` of a run seeded with `seed`.
    pub fn scenario(&self, env: &RolloutEnv, seed: u64, index: u64, stats: &mut SamplerStats) -> Result<Scenario> {
        let mut rng = rollout_rng(seed, index);
        match self {
            ScenarioSource::Crude(nat) => {
                let (s1, init) = nat.sample_initial(&mut rng, env.max_rejections)?;
                let source = |scene: &Scene, _t: usize| nat.sample_maneuver(scene, &mut rng);
                rollout(s1, init, source, &env.sim, &env.idm)
            }
            ScenarioSource::TrimFlow(sampler) => {
                let (s1, init) = sampler.sample_initial_state(&mut rng, stats)?;
                let source = sampler.maneuver_source(&mut rng, stats);
                rollout(s1, init, source, &env.sim, &env.idm)
            }
        }
    }

    pub fn outcome(&self, env: &RolloutEnv, seed: u64, index: u64, stats: &mut SamplerStats) -> Result<RolloutOutcome> {
        let sc = self.scenario(env, seed, index, stats)?;
        let log_ratio = match self {
            ScenarioSource::Crude(_) => 0.0,
            ScenarioSource::TrimFlow(_) => scenario_log_ratio(&sc)?,
        };
        Ok(RolloutOutcome {
            log_ratio,
            collided: sc.collided,
            min_ttc: sc.min_ttc,
        })
    }

    /// Outcomes of rollouts `start..end`, computed in parallel.
    pub fn outcomes(&self, env: &RolloutEnv, seed: u64, start: u64, end: u64) -> Result<(Vec<RolloutOutcome>, SamplerStats)> {
        let parts: Vec<Result<(RolloutOutcome, SamplerStats)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut stats = SamplerStats::default();
                let o = self.outcome(env, seed, i, &mut stats)?;
                Ok((o, stats))
            })
            .collect();
        let mut outcomes = Vec::with_capacity(parts.len());
        let mut stats = SamplerStats::default();
        for p in parts {
            let (o, s) = p?;
            outcomes.push(o);
            stats.merge(&s);
        }
        Ok((outcomes, stats))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Crude,
    Trimflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    /// Fixed number of rollouts; ignored when `omega_target` is set.
    pub n: u64,
    /// Stop at the first checkpoint with relative half-width below this.
    pub omega_target: Option<f64>,
    /// Cap on rollouts in target mode.
    pub max_rollouts: u64,
    pub checkpoint_interval: u64,
    pub beta: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            omega_target: None,
            max_rollouts: 10_000_000,
            checkpoint_interval: 1000,
            beta: 0.05,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 || !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig("checkpoint_interval >= 1 and 0 < beta < 1 required".into()));
        }
        match self.omega_target {
            Some(t) if !(t > 0.0) || self.max_rollouts == 0 => {
                Err(Error::InvalidConfig("omega_target and max_rollouts must be positive".into()))
            }
            None if self.n == 0 => Err(Error::InvalidConfig("n must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Everything a run produces besides the scenarios themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: EstimationReport,
    pub trace: Vec<TracePoint>,
    pub sampler: SamplerStats,
    /// Share of sampled scenarios whose minimum TTC is below the risky
    /// threshold (unweighted).
    pub risky_fraction: f64,
    /// Rollouts with a non-zero likelihood ratio contribution.
    pub hits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub risky_fraction: f64,
    pub candidates_per_step: f64,
    pub envelope_violation_rate: f64,
    pub envelope_valid: bool,
    pub initial_rejections: u64,
}

impl RunOutput {
    pub fn diagnostics(&self) -> RunDiagnostics {
        RunDiagnostics {
            risky_fraction: self.risky_fraction,
            candidates_per_step: self.sampler.candidates_per_step(),
            envelope_violation_rate: self.sampler.violation_rate(),
            envelope_valid: self.sampler.is_valid(),
            initial_rejections: self.sampler.initial_rejections,
        }
    }
}

/// Runs rollouts in blocks of `checkpoint_interval` until the budget is
/// spent or the relative half-width target is met.
pub fn run_estimate(
    source: &ScenarioSource<'_>,
    env: &RolloutEnv,
    cfg: &EstimateConfig,
    risk_cfg: &RiskConfig,
    seed: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let limit = match cfg.omega_target {
        Some(_) => cfg.max_rollouts,
        None => cfg.n,
    };
    let mut acc = Accumulator::new();
    let mut trace = Vec::new();
    let mut stats = SamplerStats::default();
    let mut risky = 0u64;
    let mut done = 0u64;
    while done < limit {
        let end = (done + cfg.checkpoint_interval).min(limit);
        let (outcomes, block_stats) = source.outcomes(env, seed, done, end)?;
        stats.merge(&block_stats);
        for (k, o) in outcomes.iter().enumerate() {
            let w = weight_from_log(o.log_ratio, (done as usize) + k)?;
            acc.push(w, o.collided);
            if risk_cfg.is_risky(o.min_ttc) {
                risky += 1;
            }
        }
        done = end;
        let point = acc.trace_point(cfg.beta);
        trace.push(point);
        log::debug!("n={} estimate={:.4e} omega={:.4}", point.n, point.estimate, point.omega);
        if matches!(cfg.omega_target, Some(t) if point.omega < t) {
            break;
        }
    }
    let mut report = acc.report(cfg.beta, Some(start.elapsed().as_secs_f64()))?;
    report.omega_target = cfg.omega_target;
    Ok(RunOutput {
        hits: acc.hits,
        report,
        trace,
        sampler: stats,
        risky_fraction: risky as f64 / acc.n as f64,
    })
}

/// Fraction of naturalistic-sampled rollouts that collide, as a quick
/// check of a configuration.
pub fn crude_rate(nat: &NaturalisticModel, env: &RolloutEnv, n: u64, seed: u64) -> Result<f64> {
    let source = ScenarioSource::Crude(nat);
    let (outcomes, _) = source.outcomes(env, seed, 0, n)?;
    Ok(outcomes.iter().filter(|o| o.collided).count() as f64 / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::sampler::SamplerConfig;
    use crate::data::{synth_naturalistic, SynthConfig};

    fn small_model() -> NaturalisticModel {
        let data = synth_naturalistic(&SynthConfig {
            n_samples: 3000,
            ..SynthConfig::default()
        })
        .unwrap();
        let (nat, _) = fit_naturalistic(
            &data.samples,
            &GmmConfig {
                k: 3,
                restarts: 1,
                max_iter: 100,
                ..GmmConfig::default()
            },
        )
        .unwrap();
        nat
    }

    fn env() -> RolloutEnv {
        RolloutEnv {
            sim: SimConfig::default(),
            idm: IdmParams::default(),
            max_rejections: 10_000,
        }
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let a: u64 = rollout_rng(1, 0).random();
        let b: u64 = rollout_rng(1, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, rollout_rng(1, 0).random::<u64>());
    }

    #[test]
    fn crude_run_is_deterministic_and_sized() {
        let nat = small_model();
        let source = ScenarioSource::Crude(&nat);
        let cfg = EstimateConfig {
            n: 100,
            checkpoint_interval: 30,
            ..EstimateConfig::default()
        };
        let a = run_estimate(&source, &env(), &cfg, &RiskConfig::default(), 5).unwrap();
        let b = run_estimate(&source, &env(), &cfg, &RiskConfig::default(), 5).unwrap();
        assert_eq!(a.report.n, 100);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.last().unwrap().n, 100);
        assert_eq!(a.report.weight_min, 1.0);
    }

    #[test]
    fn omega_target_stops_at_first_checkpoint_below() {
        let nat = small_model();
        let source = ScenarioSource::Crude(&nat);
        let risk_cfg = RiskConfig {
            risky_ttc_threshold: 10.0,
            ..RiskConfig::default()
        };
        let cfg = EstimateConfig {
            omega_target: Some(5.0),
            max_rollouts: 20_000,
            checkpoint_interval: 500,
            ..EstimateConfig::default()
        };
        let out = run_estimate(&source, &env(), &cfg, &risk_cfg, 6).unwrap();
        let first = out.trace.iter().position(|p| p.omega < 5.0);
        match first {
            Some(i) => assert_eq!(i + 1, out.trace.len()),
            None => assert_eq!(out.report.n, 20_000),
        }
    }

    #[test]
    fn matched_proposal_gives_unit_weights() {
        let nat = small_model();
        let sampler = TrimFlowSampler::with_densities(
            &nat,
            nat.joint(),
            nat.state(),
            nat.log_box_mass(),
            SamplerConfig::default(),
        )
        .unwrap();
        let source = ScenarioSource::TrimFlow(sampler);
        let cfg = EstimateConfig {
            n: 200,
            checkpoint_interval: 100,
            ..EstimateConfig::default()
        };
        let out = run_estimate(&source, &env(), &cfg, &RiskConfig::default(), 7).unwrap();
        assert!((out.report.weight_min - 1.0).abs() < 1e-4, "{}", out.report.weight_min);
        assert!((out.report.weight_max - 1.0).abs() < 1e-4, "{}", out.report.weight_max);
        assert!(out.sampler.is_valid());
    }

    #[test]
    fn training_set_drops_non_closing_scenes() {
        let nat = small_model();
        let set = build_training_set(
            &nat,
            &TrainingSetConfig {
                n_samples: 2000,
                ..TrainingSetConfig::default()
            },
        )
        .unwrap();
        assert!(set.dropped > 0);
        assert_eq!(set.weights.len() + set.dropped, 2000);
        assert!(set.weights.iter().all(|w| *w > 0.0 && *w <= 1.0));
        let floored = build_training_set(
            &nat,
            &TrainingSetConfig {
                n_samples: 2000,
                weight_floor: 1e-3,
                ..TrainingSetConfig::default()
            },
        )
        .unwrap();
        assert_eq!(floored.dropped, 0);
    }
}
