//! Stepwise accept-reject sampling of maneuvers from the flow-defined
//! conditional `q*(m | s) = q*(m, s) / q*(s)`, plus initial-scene sampling.
//!
//! The envelope of the conditional is found by a grid search over the
//! maneuver range and inflated by a safety margin. The same grid gives the
//! integral of the conditional over the range by Simpson's rule, which is
//! needed because the ratio of two separately trained flows is not exactly
//! normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::model::{joint_point, NaturalisticModel, ProposalModel};
use crate::scenario::{DataSummary, InitialTerms, Maneuver, Scene, StepTerms};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Maneuver bounds (m/s²); `None` takes the range of the data.
    pub m_min: Option<f64>,
    pub m_max: Option<f64>,
    pub envelope_grid: usize,
    pub envelope_margin: f64,
    pub max_rejections: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            m_min: None,
            m_max: None,
            envelope_grid: 65,
            envelope_margin: 1.2,
            max_rejections: 10_000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.envelope_grid < 16 || !(self.envelope_margin >= 1.0) || self.max_rejections == 0 {
            return Err(Error::InvalidConfig(
                "sampler needs envelope_grid >= 16, envelope_margin >= 1 and max_rejections >= 1".into(),
            ));
        }
        if let (Some(lo), Some(hi)) = (self.m_min, self.m_max) {
            if !(lo < hi) {
                return Err(Error::InvalidConfig(format!("m_min {lo} must be below m_max {hi}")));
            }
        }
        Ok(())
    }

    /// Physical maneuver bounds, falling back to the data range.
    pub fn bounds(&self, summary: &DataSummary) -> Result<(f64, f64)> {
        let lo = self.m_min.unwrap_or(summary.m_min);
        let hi = self.m_max.unwrap_or(summary.m_max);
        if !(lo < hi) {
            return Err(Error::InvalidConfig(format!("m_min {lo} must be below m_max {hi}")));
        }
        Ok((lo, hi))
    }
}

/// Grid-based bound of a 1-D density on an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    /// `margin · max` over the grid.
    pub bound: f64,
    /// Integral over the interval by Simpson's rule on the same grid.
    pub mass: f64,
}

/// Evaluates `exp(log_density)` on `grid` evenly spaced points spanning
/// `[lo, hi]`.
pub fn envelope<F>(mut log_density: F, lo: f64, hi: f64, grid: usize, margin: f64) -> Result<Envelope>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo < hi) || grid < 2 {
        return Err(Error::InvalidInput("envelope needs lo < hi and at least 2 grid points".into()));
    }
    let spacing = (hi - lo) / (grid - 1) as f64;
    let mut values = Vec::with_capacity(grid);
    for i in 0..grid {
        let x = if i + 1 == grid { hi } else { lo + spacing * i as f64 };
        values.push(log_density(x)?.exp());
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    let mass = stats::simpson(&values, spacing);
    if !peak.is_finite() || !mass.is_finite() {
        return Err(Error::NonFinite("conditional envelope"));
    }
    Ok(Envelope {
        bound: margin * peak,
        mass,
    })
}

/// One accepted draw of the accept-reject core.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accepted {
    pub value: f64,
    pub log_density: f64,
    pub rejections: usize,
    /// Candidates whose density exceeded the bound.
    pub violations: usize,
}

/// Draws candidates `x ~ U[lo, hi]` and heights `u ~ U[0, bound]` until
/// `u ≤ density(x)`.
pub fn accept_reject<F, R>(mut log_density: F, lo: f64, hi: f64, bound: f64, max_rejections: usize, rng: &mut R) -> Result<Accepted>
where
    F: FnMut(f64) -> Result<f64>,
    R: Rng + ?Sized,
{
    if !(bound > 0.0) {
        return Err(Error::MaxRejectionsExceeded { limit: max_rejections });
    }
    let mut violations = 0;
    for rejections in 0..max_rejections {
        let x = lo + (hi - lo) * rng.random::<f64>();
        let ld = log_density(x)?;
        let d = ld.exp();
        if d > bound {
            violations += 1;
        }
        if bound * rng.random::<f64>() <= d {
            return Ok(Accepted {
                value: x,
                log_density: ld,
                rejections,
                violations,
            });
        }
    }
    Err(Error::MaxRejectionsExceeded { limit: max_rejections })
}

/// An accepted maneuver with the log-densities the estimator needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDraw {
    pub maneuver: Maneuver,
    pub rejections: usize,
    pub violations: usize,
    pub log_q_joint: f64,
    pub log_q_state: f64,
    pub log_p_joint: f64,
    pub log_p_state: f64,
    /// `ln Z_q(s) − ln Z_p(s)`: integrals of the two conditionals over the
    /// maneuver range.
    pub log_norm: f64,
}

impl StepDraw {
    pub fn terms(&self) -> StepTerms {
        StepTerms {
            log_p_joint: self.log_p_joint,
            log_p_state: self.log_p_state,
            log_q_joint: self.log_q_joint,
            log_q_state: self.log_q_state,
            log_norm: self.log_norm,
        }
    }
}

/// Candidate and acceptance counters, mergeable across workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub steps: u64,
    pub candidates: u64,
    pub violations: u64,
    pub initial_draws: u64,
    pub initial_rejections: u64,
}

impl SamplerStats {
    pub fn record(&mut self, draw: &StepDraw) {
        self.steps += 1;
        self.candidates += draw.rejections as u64 + 1;
        self.violations += draw.violations as u64;
    }

    pub fn merge(&mut self, other: &Self) {
        self.steps += other.steps;
        self.candidates += other.candidates;
        self.violations += other.violations;
        self.initial_draws += other.initial_draws;
        self.initial_rejections += other.initial_rejections;
    }

    /// Candidates per accepted maneuver.
    pub fn candidates_per_step(&self) -> f64 {
        self.candidates as f64 / self.steps.max(1) as f64
    }

    pub fn violation_rate(&self) -> f64 {
        self.violations as f64 / self.candidates.max(1) as f64
    }

    /// A run is trustworthy only if the envelope was rarely exceeded.
    pub fn is_valid(&self) -> bool {
        self.violation_rate() < 1e-3
    }
}

/// Samples from the learned proposal and records the likelihood terms
/// against the naturalistic law.
pub struct TrimFlowSampler<'a> {
    nat: &'a NaturalisticModel,
    q_joint: &'a dyn DensityModel,
    q_state: &'a dyn DensityModel,
    log_q_box_mass: f64,
    cfg: SamplerConfig,
    bounds: (f64, f64),
}

impl<'a> TrimFlowSampler<'a> {
    pub fn new(nat: &'a NaturalisticModel, proposal: &'a ProposalModel, cfg: SamplerConfig) -> Result<Self> {
        Self::with_densities(nat, &proposal.joint, &proposal.state, proposal.log_box_mass(), cfg)
    }

    /// Uses arbitrary densities over z-scored `(m, s)` and `s` as the
    /// proposal pair.
    pub fn with_densities(
        nat: &'a NaturalisticModel,
        q_joint: &'a dyn DensityModel,
        q_state: &'a dyn DensityModel,
        log_q_box_mass: f64,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (lo, hi) = cfg.bounds(nat.summary())?;
        let bounds = (nat.normalize_maneuver(lo), nat.normalize_maneuver(hi));
        Ok(Self {
            nat,
            q_joint,
            q_state,
            log_q_box_mass,
            cfg,
            bounds,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Bound on the proposal conditional (per z-scored maneuver unit) at `scene`.
    pub fn conditional_envelope(&self, scene: &Scene) -> Result<Envelope> {
        let z_s = self.nat.normalize_scene(scene);
        let log_q_state = self.q_state.log_pdf(&z_s)?;
        self.envelope_at(&z_s, log_q_state)
    }

    fn envelope_at(&self, z_s: &[f64], log_q_state: f64) -> Result<Envelope> {
        let (lo, hi) = self.bounds;
        envelope(
            |z_m| Ok(self.q_joint.log_pdf(&joint_point(z_m, z_s))? - log_q_state),
            lo,
            hi,
            self.cfg.envelope_grid,
            self.cfg.envelope_margin,
        )
    }

    pub fn sample_maneuver<R: Rng + ?Sized>(&self, scene: &Scene, rng: &mut R) -> Result<StepDraw> {
        let z_s = self.nat.normalize_scene(scene);
        let log_q_state = self.q_state.log_pdf(&z_s)?;
        if !log_q_state.is_finite() {
            return Err(Error::NonFinite("proposal state density"));
        }
        let env = self.envelope_at(&z_s, log_q_state)?;
        let (lo, hi) = self.bounds;
        let acc = accept_reject(
            |z_m| Ok(self.q_joint.log_pdf(&joint_point(z_m, &z_s))? - log_q_state),
            lo,
            hi,
            env.bound,
            self.cfg.max_rejections,
            rng,
        )?;
        let z_m = acc.value;
        let p_mass = self.nat.conditional(&z_s)?.mass(lo, hi);
        if !(p_mass > 0.0) || !(env.mass > 0.0) {
            return Err(Error::NonFinite("conditional mass over the maneuver range"));
        }
        Ok(StepDraw {
            maneuver: Maneuver::new(self.nat.denormalize_maneuver(z_m)),
            rejections: acc.rejections,
            violations: acc.violations,
            log_q_joint: acc.log_density + log_q_state,
            log_q_state,
            log_p_joint: self.nat.log_p_joint(z_m, &z_s)?,
            log_p_state: self.nat.log_p_state(&z_s)?,
            log_norm: env.mass.ln() - p_mass.ln(),
        })
    }

    /// Initial scene from the proposal state density truncated to the data
    /// box, resampled while outside.
    pub fn sample_initial_state<R: Rng>(&self, rng: &mut R, stats: &mut SamplerStats) -> Result<(Scene, InitialTerms)> {
        stats.initial_draws += 1;
        for _ in 0..self.cfg.max_rejections {
            let z = self.q_state.sample(rng)?;
            if !self.nat.scene_in_box_from(&z) {
                stats.initial_rejections += 1;
                continue;
            }
            let scene = self.nat.denormalize_scene(&z)?;
            return Ok((
                scene,
                InitialTerms {
                    log_p_state: self.nat.log_p_state(&z)?,
                    log_q_state: self.q_state.log_pdf(&z)?,
                    log_norm: self.log_q_box_mass - self.nat.log_box_mass(),
                },
            ));
        }
        Err(Error::DegenerateFlow {
            attempts: self.cfg.max_rejections,
        })
    }

    /// Adapts [`TrimFlowSampler::sample_maneuver`] to the rollout interface.
    pub fn maneuver_source<'s, R: Rng + ?Sized>(
        &'s self,
        rng: &'s mut R,
        stats: &'s mut SamplerStats,
    ) -> impl FnMut(&Scene, usize) -> Result<(Maneuver, StepTerms)> + 's {
        move |scene, _t| {
            let draw = self.sample_maneuver(scene, rng)?;
            stats.record(&draw);
            Ok((draw.maneuver, draw.terms()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::Gmm;
    use crate::scenario::{Normalizer, JOINT_DIM, SCENE_DIM};
    use crate::sim::{rollout, IdmParams, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn standard_model(m: f64) -> NaturalisticModel {
        let summary = DataSummary {
            m_min: -m,
            m_max: m,
            scene_min: [-4.0; SCENE_DIM],
            scene_max: [4.0; SCENE_DIM],
            count: 1,
        };
        NaturalisticModel::new(Normalizer::identity(JOINT_DIM), Gmm::standard_normal(JOINT_DIM), summary, 1000, 1)
            .unwrap()
    }

    /// Joint density that is uniform in `m` on `[-w, w]` and standard
    /// normal in the scene.
    struct UniformJoint(f64);

    impl DensityModel for UniformJoint {
        fn dim(&self) -> usize {
            JOINT_DIM
        }

        fn log_pdf(&self, x: &[f64]) -> Result<f64> {
            let s: f64 = x[1..].iter().map(|v| stats::normal_log_pdf(*v)).sum();
            Ok(s - (2.0 * self.0).ln())
        }

        fn sample(&self, _rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
            unimplemented!()
        }
    }

    #[test]
    fn uniform_conditional_envelope_and_acceptance() {
        let nat = standard_model(2.0);
        let joint = UniformJoint(2.0);
        let state = Gmm::standard_normal(SCENE_DIM);
        let cfg = SamplerConfig::default();
        let sampler = TrimFlowSampler::with_densities(&nat, &joint, &state, 0.0, cfg).unwrap();
        let scene = Scene::new(0.1, -0.2, 0.3, 0.0);
        let env = sampler.conditional_envelope(&scene).unwrap();
        assert!((env.bound - 1.2 / 4.0).abs() < 1e-12);
        assert!((env.mass - 1.0).abs() < 1e-12);
        let mut r = rng(2);
        let mut stats = SamplerStats::default();
        for _ in 0..20_000 {
            stats.record(&sampler.sample_maneuver(&scene, &mut r).unwrap());
        }
        let acceptance = 1.0 / stats.candidates_per_step();
        assert!((acceptance - 1.0 / 1.2).abs() < 0.01, "{acceptance}");
        assert_eq!(stats.violations, 0);
    }

    #[test]
    fn truncated_normal_target_passes_ks() {
        let (lo, hi) = (-1.5, 2.0);
        let target = |x: f64| stats::normal_log_pdf(x);
        let env = envelope(|x| Ok(target(x)), lo, hi, 65, 1.2).unwrap();
        let mut r = rng(3);
        let mut violations = 0;
        let mut candidates = 0;
        let mut draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let a = accept_reject(|x| Ok(target(x)), lo, hi, env.bound, 10_000, &mut r).unwrap();
                violations += a.violations;
                candidates += a.rejections + 1;
                a.value
            })
            .collect();
        let (cl, ch) = (stats::normal_cdf(lo), stats::normal_cdf(hi));
        let ks = stats::ks_statistic(&mut draws, |x| (stats::normal_cdf(x) - cl) / (ch - cl));
        assert!(ks < 0.02 && stats::ks_p_value(ks, draws.len()) > 1e-3, "ks {ks}");
        assert!((violations as f64) / (candidates as f64) < 1e-3);
        assert!((env.mass - (ch - cl)).abs() < 1e-6);
    }

    #[test]
    fn zero_bound_exhausts() {
        let mut r = rng(4);
        assert!(matches!(
            accept_reject(|_| Ok(0.0), 0.0, 1.0, 0.0, 50, &mut r),
            Err(Error::MaxRejectionsExceeded { limit: 50 })
        ));
    }

    #[test]
    fn envelope_covers_random_probes() {
        let nat = standard_model(3.0);
        let joint = Gmm::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 0.5, 0.0, 0.0, 0.0]],
            vec![
                Gmm::standard_normal(5).covariances()[0].clone(),
                Gmm::standard_normal(5).covariances()[0].iter().map(|v| v * 0.5).collect(),
            ],
        )
        .unwrap();
        let state = joint.marginal(&crate::scenario::SCENE_INDICES).unwrap();
        let sampler = TrimFlowSampler::with_densities(&nat, &joint, &state, 0.0, SamplerConfig::default()).unwrap();
        let mut r = rng(5);
        for _ in 0..20 {
            let scene = Scene::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 0.0, 0.0);
            let z_s = scene.to_array();
            let env = sampler.conditional_envelope(&scene).unwrap();
            let ls = state.log_pdf(&z_s).unwrap();
            for _ in 0..1000 {
                let m = r.random_range(-3.0..3.0);
                let c = (joint.log_pdf(&joint_point(m, &z_s)).unwrap() - ls).exp();
                assert!(c <= env.bound);
            }
        }
    }

    #[test]
    fn matched_densities_give_unit_ratios() {
        let nat = standard_model(3.0);
        let sampler =
            TrimFlowSampler::with_densities(&nat, nat.joint(), nat.state(), nat.log_box_mass(), SamplerConfig::default())
                .unwrap();
        let mut r = rng(6);
        let mut stats = SamplerStats::default();
        let (s1, init) = sampler.sample_initial_state(&mut r, &mut stats).unwrap();
        assert!((init.log_p_state - init.log_q_state).abs() < 1e-12);
        let sim = SimConfig::default();
        let p = IdmParams::default();
        let source = sampler.maneuver_source(&mut r, &mut stats);
        let sc = rollout(s1, init, source, &sim, &p).unwrap();
        assert_eq!(sc.step_terms.len(), sc.maneuvers.len());
        for t in &sc.step_terms {
            assert!(t.log_ratio().abs() < 1e-6, "{}", t.log_ratio());
        }
        assert_eq!(stats.steps as usize, sc.maneuvers.len());
    }

    #[test]
    fn sampling_is_deterministic() {
        let nat = standard_model(3.0);
        let sampler =
            TrimFlowSampler::with_densities(&nat, nat.joint(), nat.state(), 0.0, SamplerConfig::default()).unwrap();
        let scene = Scene::new(0.5, 0.0, 1.0, 0.0);
        let a: Vec<f64> = (0..5)
            .scan(rng(7), |r, _| Some(sampler.sample_maneuver(&scene, r).unwrap().maneuver.a_cmd))
            .collect();
        let b: Vec<f64> = (0..5)
            .scan(rng(7), |r, _| Some(sampler.sample_maneuver(&scene, r).unwrap().maneuver.a_cmd))
            .collect();
        assert_eq!(a, b);
    }
}
