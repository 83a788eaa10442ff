//! Run configuration: one JSON document holding every module's settings,
//! with dotted `key=value` overrides and an environment seed override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ColumnMap, ExtractConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::estimator::PlannerInput;
use crate::flow::{FlowArch, TrainConfig};
use crate::gmm::GmmConfig;
use crate::pipeline::{EstimateConfig, Mode, RolloutEnv, TrainingSetConfig};
use crate::risk::RiskConfig;
use crate::sampler::SamplerConfig;
use crate::sim::{IdmParams, SimConfig};

pub const SEED_ENV: &str = "RAREFLOW_SEED";

/// Where a run reads its input and writes its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Track CSV to ingest; when absent, `ingest` synthesizes data.
    pub data_in: Option<PathBuf>,
    /// Directory for the samples CSV and the data summary.
    pub data_dir: PathBuf,
    pub models_out: PathBuf,
    pub reports_out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_in: None,
            data_dir: PathBuf::from("data"),
            models_out: PathBuf::from("models"),
            reports_out: PathBuf::from("reports"),
        }
    }
}

impl Paths {
    pub fn samples(&self) -> PathBuf {
        self.data_dir.join("samples.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.data_dir.join("summary.json")
    }

    pub fn gmm(&self) -> PathBuf {
        self.models_out.join("gmm.json")
    }

    pub fn naturalistic(&self) -> PathBuf {
        self.models_out.join("naturalistic.json")
    }

    pub fn proposal(&self) -> PathBuf {
        self.models_out.join("proposal.json")
    }

    pub fn fit_report(&self) -> PathBuf {
        self.models_out.join("fit.json")
    }

    pub fn joint_flow(&self) -> PathBuf {
        self.models_out.join("flow_joint.json")
    }

    pub fn state_flow(&self) -> PathBuf {
        self.models_out.join("flow_state.json")
    }

    pub fn joint_loss(&self) -> PathBuf {
        self.models_out.join("loss_joint.csv")
    }

    pub fn state_loss(&self) -> PathBuf {
        self.models_out.join("loss_state.csv")
    }

    pub fn report(&self, mode: Mode) -> PathBuf {
        self.reports_out.join(format!("report_{}.json", mode_name(mode)))
    }

    pub fn trace(&self, mode: Mode) -> PathBuf {
        self.reports_out.join(format!("trace_{}.csv", mode_name(mode)))
    }

    pub fn diagnostics(&self, mode: Mode) -> PathBuf {
        self.reports_out.join(format!("diagnostics_{}.json", mode_name(mode)))
    }

    pub fn comparison(&self) -> PathBuf {
        self.reports_out.join("comparison.json")
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Crude => "crude",
        Mode::Trimflow => "trimflow",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the estimation rollouts. Each training stage has its own seed
    /// in its module section.
    pub seed: u64,
    /// Rollout worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: Paths,
    pub columns: ColumnMap,
    pub extract: ExtractConfig,
    pub synth: SynthConfig,
    pub gmm: GmmConfig,
    pub flow: FlowArch,
    pub train: TrainConfig,
    pub training_set: TrainingSetConfig,
    pub sim: SimConfig,
    pub idm: IdmParams,
    pub sampler: SamplerConfig,
    pub estimate: EstimateConfig,
    pub risk: RiskConfig,
    pub plan: PlannerInput,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            paths: Paths::default(),
            columns: ColumnMap::default(),
            extract: ExtractConfig::default(),
            synth: SynthConfig::default(),
            gmm: GmmConfig::default(),
            flow: FlowArch::default(),
            train: TrainConfig::default(),
            training_set: TrainingSetConfig::default(),
            sim: SimConfig::default(),
            idm: IdmParams::default(),
            sampler: SamplerConfig::default(),
            estimate: EstimateConfig::default(),
            risk: RiskConfig::default(),
            plan: PlannerInput {
                p: 1e-3,
                b: 0.2,
                beta: 0.05,
            },
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`), applies `overrides` in
    /// order, then the seed from the environment, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let value = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::FileNotFound(p.to_path_buf()));
                }
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let seed = std::env::var(SEED_ENV).ok();
        Self::from_value(value, overrides, seed.as_deref())
    }

    pub fn from_value(value: Value, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let base: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut tree = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.idm.validate()?;
        self.sampler.validate()?;
        self.estimate.validate()?;
        self.risk.validate()?;
        if self.gmm.k == 0 {
            return Err(Error::InvalidInput("gmm.k must be at least 1".into()));
        }
        if self.flow.n_layers == 0 || self.flow.hidden.contains(&0) {
            return Err(Error::InvalidConfig("flow layers and widths must be positive".into()));
        }
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.training_set.weight_floor) || self.training_set.n_samples == 0 {
            return Err(Error::InvalidConfig(
                "training_set.weight_floor must lie in [0, 1] and n_samples be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn rollout_env(&self) -> RolloutEnv {
        RolloutEnv {
            sim: self.sim,
            idm: self.idm,
            max_rejections: self.sampler.max_rejections,
        }
    }
}

/// Sets the dotted `key` of `tree` to `value`, read as JSON when it parses
/// and as a string otherwise. The key must already exist.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let mut node = tree;
    for part in key.trim().split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
