//! Time-to-collision, the smooth risk weight `e^{-ttc}` and the hard
//! collision indicator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    /// TTC values at or above this are reported as "no conflict" (s).
    pub ttc_cap: f64,
    /// Diagnostic threshold on a scenario's minimum TTC (s).
    pub risky_ttc_threshold: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            ttc_cap: 100.0,
            risky_ttc_threshold: 10.0,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttc_cap > 0.0 && self.risky_ttc_threshold > 0.0) {
            return Err(Error::InvalidConfig(
                "risk thresholds must be positive".into(),
            ));
        }
        Ok(())
    }

    /// TTC clipped at `ttc_cap` for reporting.
    pub fn reported_ttc(&self, scene: &Scene) -> f64 {
        ttc(scene).min(self.ttc_cap)
    }

    pub fn is_risky(&self, min_ttc: f64) -> bool {
        min_ttc < self.risky_ttc_threshold
    }
}

/// Constant-velocity time to collision. Zero at contact, `+inf` when the
/// follower is not closing in.
pub fn ttc(scene: &Scene) -> f64 {
    if scene.gap <= 0.0 {
        return 0.0;
    }
    let closing = scene.v_av - scene.v_lead;
    if closing > 0.0 {
        scene.gap / closing
    } else {
        f64::INFINITY
    }
}

/// `e^{-ttc}`: 1 at contact, 0 when not closing.
pub fn risk_weight(scene: &Scene) -> f64 {
    (-ttc(scene)).exp()
}

pub fn is_collision(scene: &Scene) -> bool {
    scene.gap <= 0.0
}
