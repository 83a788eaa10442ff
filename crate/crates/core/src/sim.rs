//! One-leader/one-follower longitudinal kinematics with an IDM follower
//! whose braking is capped at `b_m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk;
use crate::scenario::{InitialTerms, Maneuver, Scenario, Scene, StepTerms};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub t_headway: f64,
    /// Maximum acceleration (m/s²).
    pub a_max: f64,
    /// Comfortable deceleration (m/s²).
    pub b_comf: f64,
    /// Jam distance (m).
    pub s0: f64,
    /// Acceleration exponent.
    pub delta: f64,
    /// Hard cap on the deceleration magnitude (m/s²); `inf` disables it.
    pub b_max: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 33.3,
            t_headway: 1.5,
            a_max: 1.5,
            b_comf: 1.67,
            s0: 2.0,
            delta: 4.0,
            b_max: 4.5,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.v0,
            self.t_headway,
            self.a_max,
            self.b_comf,
            self.s0,
            self.delta,
            self.b_max,
        ]
        .iter()
        .all(|v| *v > 0.0);
        if !all_positive || self.b_max < self.b_comf {
            return Err(Error::InvalidConfig(
                "IDM parameters must be positive with b_max >= b_comf".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Integration step (s).
    pub dt: f64,
    /// Horizon in steps.
    pub horizon: usize,
    pub stop_on_collision: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            horizon: 10,
            stop_on_collision: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.horizon == 0 {
            return Err(Error::InvalidConfig("dt must be > 0 and horizon >= 1".into()));
        }
        Ok(())
    }
}

/// IDM acceleration of the follower, clamped below at `-b_max`.
///
/// The dynamic part of the desired gap is floored at zero so a receding
/// leader never raises the braking demand.
pub fn idm_accel(scene: &Scene, p: &IdmParams) -> Result<f64> {
    if !(scene.gap > 0.0) {
        return Err(Error::NonPositiveGap { gap: scene.gap });
    }
    let v = scene.v_av;
    let dv = scene.v_av - scene.v_lead;
    let dynamic = v * p.t_headway + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt());
    let desired_gap = p.s0 + dynamic.max(0.0);
    let free = (v / p.v0).powf(p.delta);
    let interaction = (desired_gap / scene.gap).powi(2);
    let raw = p.a_max * (1.0 - free - interaction);
    Ok(raw.max(-p.b_max))
}

/// Follower acceleration, including the post-contact case where the
/// follower simply brakes as hard as allowed.
fn follower_accel(scene: &Scene, p: &IdmParams) -> f64 {
    if scene.gap > 0.0 {
        // gap checked above, cannot fail
        idm_accel(scene, p).unwrap_or(-p.b_max)
    } else if p.b_max.is_finite() {
        -p.b_max
    } else {
        f64::NEG_INFINITY
    }
}

/// Advances one step with semi-implicit Euler: speeds first (clamped at
/// zero), then positions with the new speeds.
pub fn step(scene: &Scene, maneuver: Maneuver, cfg: &SimConfig, p: &IdmParams) -> Scene {
    let a_av = follower_accel(scene, p);
    let v_av = (scene.v_av + a_av * cfg.dt).max(0.0);
    let v_lead = (scene.v_lead + maneuver.a_cmd * cfg.dt).max(0.0);
    let gap = scene.gap + (v_lead - v_av) * cfg.dt;
    Scene {
        v_av,
        v_lead,
        gap,
        a_lead: maneuver.a_cmd,
    }
}

/// Rolls a scenario out from `initial` for up to `cfg.horizon` steps.
///
/// `source` is called once per step with the current scene and step index
/// and returns the maneuver to apply together with its density terms.
/// With `stop_on_collision` the rollout ends at the first contact.
pub fn rollout<F>(
    initial: Scene,
    initial_terms: InitialTerms,
    mut source: F,
    cfg: &SimConfig,
    p: &IdmParams,
) -> Result<Scenario>
where
    F: FnMut(&Scene, usize) -> Result<(Maneuver, StepTerms)>,
{
    let mut scenes = Vec::with_capacity(cfg.horizon + 1);
    let mut maneuvers = Vec::with_capacity(cfg.horizon);
    let mut step_terms = Vec::with_capacity(cfg.horizon);
    let mut collided = risk::is_collision(&initial);
    let mut min_ttc = risk::ttc(&initial);
    scenes.push(initial);
    let mut current = initial;
    for t in 0..cfg.horizon {
        if collided && cfg.stop_on_collision {
            break;
        }
        let (maneuver, terms) = source(&current, t)?;
        current = step(&current, maneuver, cfg, p);
        maneuvers.push(maneuver);
        step_terms.push(terms);
        scenes.push(current);
        min_ttc = min_ttc.min(risk::ttc(&current));
        collided |= risk::is_collision(&current);
    }
    Ok(Scenario {
        maneuvers,
        scenes,
        collided,
        min_ttc,
        initial_terms,
        step_terms,
    })
}
