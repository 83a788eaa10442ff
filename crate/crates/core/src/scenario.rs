//! Scene, maneuver and scenario types, the affine variable normalizer and
//! data-range summaries.
//!
//! Joint vectors are laid out as `[m, v_av, v_lead, gap, a_lead]`: the
//! maneuver first ([`MANEUVER_INDEX`]), then the four scene variables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk;

/// Number of scene variables.
pub const SCENE_DIM: usize = 4;
/// Number of maneuver variables.
pub const MANEUVER_DIM: usize = 1;
/// Dimension of the joint `(m, s)` space.
pub const JOINT_DIM: usize = SCENE_DIM + MANEUVER_DIM;
/// Position of the maneuver in a joint vector.
pub const MANEUVER_INDEX: usize = 0;
/// Positions of the scene variables in a joint vector.
pub const SCENE_INDICES: [usize; SCENE_DIM] = [1, 2, 3, 4];

/// State of one car-following scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Speed of the vehicle under test (m/s).
    pub v_av: f64,
    /// Speed of the leading vehicle (m/s).
    pub v_lead: f64,
    /// Bumper-to-bumper distance (m). Non-positive only in a collided scene.
    pub gap: f64,
    /// Current acceleration of the leading vehicle (m/s²).
    pub a_lead: f64,
}

impl Scene {
    pub fn new(v_av: f64, v_lead: f64, gap: f64, a_lead: f64) -> Self {
        Self {
            v_av,
            v_lead,
            gap,
            a_lead,
        }
    }

    pub fn to_array(&self) -> [f64; SCENE_DIM] {
        [self.v_av, self.v_lead, self.gap, self.a_lead]
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != SCENE_DIM {
            return Err(Error::DimensionMismatch {
                expected: SCENE_DIM,
                got: values.len(),
            });
        }
        Ok(Self::new(values[0], values[1], values[2], values[3]))
    }

    /// The joint `[m, v_av, v_lead, gap, a_lead]` vector for this scene.
    pub fn joint_with(&self, maneuver: Maneuver) -> [f64; JOINT_DIM] {
        [maneuver.a_cmd, self.v_av, self.v_lead, self.gap, self.a_lead]
    }
}

/// Commanded lead-vehicle acceleration for the next step (m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maneuver {
    pub a_cmd: f64,
}

impl Maneuver {
    pub fn new(a_cmd: f64) -> Self {
        Self { a_cmd }
    }
}

/// Log-density terms recorded at the initial scene.
///
/// `log_norm` is `ln Q(B) − ln P(B)`, the log ratio of the proposal and
/// naturalistic masses of the admissible scene box both initial laws are
/// truncated to. It is zero when the two laws coincide.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialTerms {
    pub log_p_state: f64,
    pub log_q_state: f64,
    pub log_norm: f64,
}

/// Per-step log-density terms: the naturalistic joint and state densities,
/// the proposal joint and state densities, and `log_norm = ln Z_q(s) −
/// ln Z_p(s)`, the log ratio of the two conditionals' masses over the
/// maneuver bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub log_p_joint: f64,
    pub log_p_state: f64,
    pub log_q_joint: f64,
    pub log_q_state: f64,
    pub log_norm: f64,
}

impl StepTerms {
    /// Terms for a step drawn from the naturalistic law itself: the ratio
    /// contribution is exactly zero.
    pub fn self_ratio(log_joint: f64, log_state: f64) -> Self {
        Self {
            log_p_joint: log_joint,
            log_p_state: log_state,
            log_q_joint: log_joint,
            log_q_state: log_state,
            log_norm: 0.0,
        }
    }

    pub fn log_ratio(&self) -> f64 {
        self.log_p_joint + self.log_q_state - self.log_q_joint - self.log_p_state + self.log_norm
    }
}

/// An initial scene, the maneuvers applied, the scenes traversed and the
/// density bookkeeping needed to reweight it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub maneuvers: Vec<Maneuver>,
    /// Always one entry longer than `maneuvers`; `scenes[0]` is the initial scene.
    pub scenes: Vec<Scene>,
    pub collided: bool,
    pub min_ttc: f64,
    pub initial_terms: InitialTerms,
    pub step_terms: Vec<StepTerms>,
}

impl Scenario {
    pub fn initial(&self) -> &Scene {
        &self.scenes[0]
    }

    pub fn final_scene(&self) -> &Scene {
        self.scenes.last().expect("scenario always holds the initial scene")
    }

    pub fn len(&self) -> usize {
        self.maneuvers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maneuvers.is_empty()
    }

    /// Writes the per-timestep log as CSV with columns
    /// `step, v_av, v_lead, gap, a_lead, a_cmd, ttc, collided`.
    ///
    /// The final scene has no maneuver and an empty `a_cmd` cell.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "step", "v_av", "v_lead", "gap", "a_lead", "a_cmd", "ttc", "collided",
        ])?;
        let last = self.scenes.len() - 1;
        for (t, scene) in self.scenes.iter().enumerate() {
            let a_cmd = self
                .maneuvers
                .get(t)
                .map(|m| fmt_f64(m.a_cmd))
                .unwrap_or_default();
            let collided = t == last && self.collided;
            w.write_record([
                t.to_string(),
                fmt_f64(scene.v_av),
                fmt_f64(scene.v_lead),
                fmt_f64(scene.gap),
                fmt_f64(scene.a_lead),
                a_cmd,
                fmt_f64(risk::ttc(scene)),
                collided.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed 17-significant-digit float formatting used by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Per-dimension z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::DimensionMismatch {
                expected: shift.len(),
                got: scale.len(),
            });
        }
        if let Some(dim) = scale.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::ConstantDimension { dim });
        }
        Ok(Self { shift, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn normalize_one(&self, dim: usize, value: f64) -> f64 {
        (value - self.shift[dim]) / self.scale[dim]
    }

    pub fn denormalize_one(&self, dim: usize, value: f64) -> f64 {
        value * self.scale[dim] + self.shift[dim]
    }

    /// Restriction of the transform to a subset of dimensions.
    pub fn select(&self, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyDims);
        }
        if let Some(&d) = dims.iter().find(|&&d| d >= self.dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: d + 1,
            });
        }
        Ok(Self {
            shift: dims.iter().map(|&d| self.shift[d]).collect(),
            scale: dims.iter().map(|&d| self.scale[d]).collect(),
        })
    }

    /// `ln |det|` of the normalizing map; add it to a normalized-space
    /// log-density to obtain the physical-space log-density.
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Fits a z-score normalizer (sample mean and `n − 1` standard deviation).
pub fn fit_normalizer(rows: &[Vec<f64>]) -> Result<Normalizer> {
    let first = rows.first().ok_or(Error::ConstantDimension { dim: 0 })?;
    let dim = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if rows.len() < 2 {
        return Err(Error::ConstantDimension { dim: 0 });
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| (v / (n - 1.0)).sqrt()).collect();
    if let Some(dim) = scale.iter().position(|s| *s == 0.0) {
        return Err(Error::ConstantDimension { dim });
    }
    Normalizer::new(mean, scale)
}

/// Ranges of the naturalistic data: maneuver bounds and the per-variable
/// scene box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub m_min: f64,
    pub m_max: f64,
    pub scene_min: [f64; SCENE_DIM],
    pub scene_max: [f64; SCENE_DIM],
    pub count: usize,
}

impl DataSummary {
    pub fn from_samples(samples: &[(Scene, Maneuver)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut m_min = f64::INFINITY;
        let mut m_max = f64::NEG_INFINITY;
        let mut scene_min = [f64::INFINITY; SCENE_DIM];
        let mut scene_max = [f64::NEG_INFINITY; SCENE_DIM];
        for (s, m) in samples {
            m_min = m_min.min(m.a_cmd);
            m_max = m_max.max(m.a_cmd);
            for (i, v) in s.to_array().into_iter().enumerate() {
                scene_min[i] = scene_min[i].min(v);
                scene_max[i] = scene_max[i].max(v);
            }
        }
        // Deliberately `!(a < b)` so NaN bounds are rejected too.
        if !(m_min < m_max) {
            return Err(Error::InvalidInput(format!(
                "maneuver range is degenerate: [{m_min}, {m_max}]"
            )));
        }
        Ok(Self {
            m_min,
            m_max,
            scene_min,
            scene_max,
            count: samples.len(),
        })
    }

    pub fn contains(&self, scene: &Scene) -> bool {
        scene
            .to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.scene_min[i] && *v <= self.scene_max[i])
    }
}

/// Flattens `(Scene, Maneuver)` samples into joint vectors.
pub fn joint_rows(samples: &[(Scene, Maneuver)]) -> Vec<Vec<f64>> {
    samples.iter().map(|(s, m)| s.joint_with(*m).to_vec()).collect()
}
