//! The naturalistic law `p` and the learned proposal `q*` over scenes and
//! maneuvers, both expressed in z-scored coordinates.
//!
//! Initial scenes are restricted to the bounding box of the naturalistic
//! data and maneuvers to its observed range, so every law here is the
//! truncation of its underlying density. The normalizing constants of the
//! truncations show up as `log_norm` terms in the likelihood ratios.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::gmm::{Gmm, GmmFile, Mixture1d, ScalarConditional};
use crate::scenario::{
    DataSummary, InitialTerms, Maneuver, Normalizer, Scene, StepTerms, JOINT_DIM, MANEUVER_INDEX, SCENE_DIM,
    SCENE_INDICES,
};

/// Number of draws used to estimate how much mass a law puts in the data box.
pub const DEFAULT_BOX_SAMPLES: usize = 100_000;

pub const FORMAT_VERSION: u32 = 1;

/// Metadata saved next to the joint mixture. The mixture itself lives in
/// its own file, named relative to this one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalisticFile {
    pub format_version: u32,
    pub gmm: PathBuf,
    pub normalizer: Normalizer,
    pub summary: DataSummary,
    /// Exact state marginal, kept for inspection.
    pub state_marginal: GmmFile,
    pub m_bounds: [f64; 2],
    pub log_box_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub format_version: u32,
    pub joint: PathBuf,
    pub state: PathBuf,
    pub log_box_mass: f64,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn file_name(path: &Path) -> PathBuf {
    path.file_name().map(PathBuf::from).unwrap_or_else(|| path.to_path_buf())
}

fn sibling(of: &Path, name: &Path) -> PathBuf {
    of.parent().map(|d| d.join(name)).unwrap_or_else(|| name.to_path_buf())
}

#[derive(Debug, Clone)]
pub struct NaturalisticModel {
    normalizer: Normalizer,
    state_normalizer: Normalizer,
    joint: Gmm,
    state: Gmm,
    conditional: ScalarConditional,
    summary: DataSummary,
    m_bounds: (f64, f64),
    log_box_mass: f64,
}

impl NaturalisticModel {
    /// `joint` is a density over z-scored `[m, v_av, v_lead, gap, a_lead]`.
    pub fn new(normalizer: Normalizer, joint: Gmm, summary: DataSummary, box_samples: usize, seed: u64) -> Result<Self> {
        let mut model = Self::from_parts(normalizer, joint, summary, 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state_law = &model.state;
        let inside = estimate_box_mass(box_samples, |_| model.scene_in_box_from(&state_law.sample(&mut rng)))?;
        model.log_box_mass = inside.ln();
        Ok(model)
    }

    /// Rebuilds a model whose box mass is already known.
    pub fn from_parts(normalizer: Normalizer, joint: Gmm, summary: DataSummary, log_box_mass: f64) -> Result<Self> {
        if joint.dim() != JOINT_DIM || normalizer.dim() != JOINT_DIM {
            return Err(Error::DimensionMismatch {
                expected: JOINT_DIM,
                got: joint.dim().min(normalizer.dim()),
            });
        }
        let state_normalizer = normalizer.select(&SCENE_INDICES)?;
        let state = joint.marginal(&SCENE_INDICES)?;
        let conditional = ScalarConditional::new(&joint, MANEUVER_INDEX)?;
        let m_bounds = (
            normalizer.normalize_one(MANEUVER_INDEX, summary.m_min),
            normalizer.normalize_one(MANEUVER_INDEX, summary.m_max),
        );
        if !(log_box_mass <= 0.0) {
            return Err(Error::InvalidInput(format!("log box mass {log_box_mass} must be <= 0")));
        }
        Ok(Self {
            normalizer,
            state_normalizer,
            joint,
            state,
            conditional,
            summary,
            m_bounds,
            log_box_mass,
        })
    }

    /// Writes the joint mixture to `gmm_path` and the metadata to `path`.
    pub fn save(&self, path: &Path, gmm_path: &Path) -> Result<()> {
        self.joint.save(gmm_path)?;
        let file = NaturalisticFile {
            format_version: FORMAT_VERSION,
            gmm: file_name(gmm_path),
            normalizer: self.normalizer.clone(),
            summary: self.summary.clone(),
            state_marginal: self.state.to_file(),
            m_bounds: [self.m_bounds.0, self.m_bounds.1],
            log_box_mass: self.log_box_mass,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: NaturalisticFile = serde_json::from_str(&read_text(path)?)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(file.format_version));
        }
        let gmm_path = sibling(path, &file.gmm);
        if !gmm_path.exists() {
            return Err(Error::FileNotFound(gmm_path));
        }
        let joint = Gmm::load(&gmm_path)?;
        Self::from_parts(file.normalizer, joint, file.summary, file.log_box_mass)
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn state_normalizer(&self) -> &Normalizer {
        &self.state_normalizer
    }

    pub fn joint(&self) -> &Gmm {
        &self.joint
    }

    pub fn state(&self) -> &Gmm {
        &self.state
    }

    pub fn summary(&self) -> &DataSummary {
        &self.summary
    }

    /// Maneuver bounds in z-scored units.
    pub fn m_bounds(&self) -> (f64, f64) {
        self.m_bounds
    }

    /// `ln P(s ∈ box)` under the untruncated state density.
    pub fn log_box_mass(&self) -> f64 {
        self.log_box_mass
    }

    pub fn normalize_scene(&self, scene: &Scene) -> [f64; SCENE_DIM] {
        let mut z = scene.to_array();
        for (i, v) in z.iter_mut().enumerate() {
            *v = self.state_normalizer.normalize_one(i, *v);
        }
        z
    }

    pub fn denormalize_scene(&self, z: &[f64]) -> Result<Scene> {
        Scene::from_slice(&self.state_normalizer.denormalize(z)?)
    }

    pub fn normalize_maneuver(&self, m: f64) -> f64 {
        self.normalizer.normalize_one(MANEUVER_INDEX, m)
    }

    pub fn denormalize_maneuver(&self, z: f64) -> f64 {
        self.normalizer.denormalize_one(MANEUVER_INDEX, z)
    }

    /// Whether a z-scored scene falls inside the physical data box.
    pub fn scene_in_box_from(&self, z: &[f64]) -> bool {
        match self.denormalize_scene(z) {
            Ok(s) => self.summary.contains(&s),
            Err(_) => false,
        }
    }

    pub fn log_p_state(&self, z_scene: &[f64]) -> Result<f64> {
        self.state.log_pdf(z_scene)
    }

    pub fn log_p_joint(&self, z_m: f64, z_scene: &[f64]) -> Result<f64> {
        self.joint.log_pdf(&joint_point(z_m, z_scene))
    }

    /// The untruncated conditional law of the z-scored maneuver.
    pub fn conditional(&self, z_scene: &[f64]) -> Result<Mixture1d> {
        self.conditional.at(z_scene)
    }

    /// Initial scene from the state density truncated to the data box.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R, max_tries: usize) -> Result<(Scene, InitialTerms)> {
        for _ in 0..max_tries.max(1) {
            let z = self.state.sample(rng);
            if self.scene_in_box_from(&z) {
                let lp = self.log_p_state(&z)?;
                let scene = self.denormalize_scene(&z)?;
                return Ok((
                    scene,
                    InitialTerms {
                        log_p_state: lp,
                        log_q_state: lp,
                        log_norm: 0.0,
                    },
                ));
            }
        }
        Err(Error::MaxRejectionsExceeded { limit: max_tries })
    }

    /// Naturalistic maneuver, drawn exactly from `p(m | s)` truncated to the
    /// maneuver range.
    pub fn sample_maneuver<R: Rng + ?Sized>(&self, scene: &Scene, rng: &mut R) -> Result<(Maneuver, StepTerms)> {
        let z_s = self.normalize_scene(scene);
        let mixture = self.conditional(&z_s)?;
        let (lo, hi) = self.m_bounds;
        let z_m = mixture.sample_truncated(lo, hi, rng)?;
        let log_state = self.log_p_state(&z_s)?;
        let log_joint = self.log_p_joint(z_m, &z_s)?;
        Ok((
            Maneuver::new(self.denormalize_maneuver(z_m)),
            StepTerms::self_ratio(log_joint, log_state),
        ))
    }
}

/// The learned proposal: a flow over the z-scored joint `(m, s)` and one
/// over the z-scored scene.
#[derive(Debug, Clone)]
pub struct ProposalModel {
    pub joint: Flow,
    pub state: Flow,
    log_box_mass: f64,
}

impl ProposalModel {
    pub fn new(joint: Flow, state: Flow, nat: &NaturalisticModel, box_samples: usize, seed: u64) -> Result<Self> {
        if joint.dim() != JOINT_DIM || state.dim() != SCENE_DIM {
            return Err(Error::DimensionMismatch {
                expected: JOINT_DIM,
                got: joint.dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failure = None;
        let inside = estimate_box_mass(box_samples, |_| match state.sample(&mut rng) {
            Ok(z) => nat.scene_in_box_from(&z),
            Err(e) => {
                failure.get_or_insert(e);
                false
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let inside = inside.map_err(|_| Error::DegenerateFlow { attempts: box_samples })?;
        Ok(Self {
            joint,
            state,
            log_box_mass: inside.ln(),
        })
    }

    pub fn from_parts(joint: Flow, state: Flow, log_box_mass: f64) -> Result<Self> {
        if joint.dim() != JOINT_DIM || state.dim() != SCENE_DIM {
            return Err(Error::DimensionMismatch {
                expected: JOINT_DIM,
                got: joint.dim(),
            });
        }
        if !(log_box_mass <= 0.0) {
            return Err(Error::InvalidInput(format!("log box mass {log_box_mass} must be <= 0")));
        }
        Ok(Self {
            joint,
            state,
            log_box_mass,
        })
    }

    /// Writes both flows and a metadata file at `path` naming them.
    pub fn save(&self, path: &Path, joint_path: &Path, state_path: &Path) -> Result<()> {
        self.joint.save(joint_path)?;
        self.state.save(state_path)?;
        let file = ProposalFile {
            format_version: FORMAT_VERSION,
            joint: file_name(joint_path),
            state: file_name(state_path),
            log_box_mass: self.log_box_mass,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ProposalFile = serde_json::from_str(&read_text(path)?)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(file.format_version));
        }
        let joint = Flow::load(&sibling(path, &file.joint))?;
        let state = Flow::load(&sibling(path, &file.state))?;
        Self::from_parts(joint, state, file.log_box_mass)
    }

    /// `ln Q(s ∈ box)` under the untruncated state flow.
    pub fn log_box_mass(&self) -> f64 {
        self.log_box_mass
    }
}

pub fn joint_point(z_m: f64, z_scene: &[f64]) -> [f64; JOINT_DIM] {
    let mut x = [0.0; JOINT_DIM];
    x[MANEUVER_INDEX] = z_m;
    for (k, &i) in SCENE_INDICES.iter().enumerate() {
        x[i] = z_scene[k];
    }
    x
}

fn estimate_box_mass(n: usize, mut inside: impl FnMut(usize) -> bool) -> Result<f64> {
    if n == 0 {
        return Ok(1.0);
    }
    let hits = (0..n).filter(|&i| inside(i)).count();
    if hits == 0 {
        return Err(Error::NonFinite("no probability mass inside the data box"));
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArch;

    fn standard_model() -> NaturalisticModel {
        let summary = DataSummary {
            m_min: -3.0,
            m_max: 3.0,
            scene_min: [-3.0; SCENE_DIM],
            scene_max: [3.0; SCENE_DIM],
            count: 1,
        };
        NaturalisticModel::new(Normalizer::identity(JOINT_DIM), Gmm::standard_normal(JOINT_DIM), summary, 20_000, 1)
            .unwrap()
    }

    #[test]
    fn box_mass_matches_product_of_intervals() {
        let model = standard_model();
        let one = crate::stats::normal_cdf(3.0) - crate::stats::normal_cdf(-3.0);
        let exact = 4.0 * one.ln();
        assert!((model.log_box_mass() - exact).abs() < 3e-3);
    }

    #[test]
    fn crude_draws_stay_in_bounds_with_zero_ratio() {
        let model = standard_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (s, init) = model.sample_initial(&mut rng, 100).unwrap();
            assert!(model.summary().contains(&s));
            assert_eq!(init.log_p_state, init.log_q_state);
            let (m, terms) = model.sample_maneuver(&s, &mut rng).unwrap();
            assert!((-3.0..=3.0).contains(&m.a_cmd));
            assert!(terms.log_ratio().abs() < 1e-12);
        }
    }

    #[test]
    fn identity_proposal_box_mass() {
        let model = standard_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = FlowArch {
            hidden: [4, 4],
            ..FlowArch::default()
        };
        let joint = Flow::new(JOINT_DIM, &arch, &mut rng).unwrap();
        let state = Flow::new(SCENE_DIM, &arch, &mut rng).unwrap();
        let prop = ProposalModel::new(joint, state, &model, 20_000, 4).unwrap();
        assert!((prop.log_box_mass() - model.log_box_mass()).abs() < 5e-3);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = standard_model();
        let meta = dir.path().join("nat.json");
        model.save(&meta, &dir.path().join("gmm.json")).unwrap();
        let back = NaturalisticModel::load(&meta).unwrap();
        assert_eq!(back.log_box_mass(), model.log_box_mass());
        assert_eq!(back.joint(), model.joint());
        assert_eq!(back.m_bounds(), model.m_bounds());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = FlowArch {
            hidden: [3, 3],
            zero_init_last: false,
            ..FlowArch::default()
        };
        let joint = Flow::new(JOINT_DIM, &arch, &mut rng).unwrap();
        let state = Flow::new(SCENE_DIM, &arch, &mut rng).unwrap();
        let prop = ProposalModel::from_parts(joint, state, -0.25).unwrap();
        let pm = dir.path().join("proposal.json");
        prop.save(&pm, &dir.path().join("j.json"), &dir.path().join("s.json")).unwrap();
        let back = ProposalModel::load(&pm).unwrap();
        assert_eq!(back.log_box_mass(), -0.25);
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        assert_eq!(back.joint.log_pdf(&x).unwrap(), prop.joint.log_pdf(&x).unwrap());

        std::fs::remove_file(dir.path().join("gmm.json")).unwrap();
        assert!(matches!(NaturalisticModel::load(&meta), Err(Error::FileNotFound(_))));
    }
}
