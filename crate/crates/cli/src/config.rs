//! Run configuration: one JSON file for every command.
//!
//! A user file is merged key by key over [`RunConfig::default`], so it only
//! needs the fields it changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use dapa_core::datagen::WorldSpec;
use dapa_core::pose_prior::PriorConfig;
use dapa_core::regressor::RegressorConfig;
use dapa_core::trainer::{AdaptMode, Phase, TrainConfig, DEFAULT_ALPHAS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub rings_per_bone: usize,
    pub ring_vertices: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            rings_per_bone: 3,
            ring_vertices: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// PCK thresholds as fractions of torso length, ascending.
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

/// Where each command reads and writes. `{mode}` in `adapt` expands to the
/// kebab-case mode name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub prior: PathBuf,
    pub pretrain: PathBuf,
    pub adapt: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            prior: "runs/prior".into(),
            pretrain: "runs/pretrain".into(),
            adapt: "runs/adapt-{mode}".into(),
        }
    }
}

impl Paths {
    pub fn adapt_dir(&self, mode: AdaptMode) -> PathBuf {
        self.adapt.replace("{mode}", &kebab(mode)).into()
    }
}

pub fn kebab(mode: AdaptMode) -> String {
    mode.name().replace('_', "-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub template: TemplateConfig,
    pub prior: PriorConfig,
    pub regressor: RegressorConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            template: TemplateConfig::default(),
            prior: PriorConfig::default(),
            regressor: RegressorConfig::default(),
            pretrain: TrainConfig::pretrain(),
            adapt: TrainConfig::adapt(AdaptMode::Dapa),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Recursively overlays `patch` on `base`. Objects merge; anything else
/// replaces. Keys absent from `base` are kept so deserialization can reject
/// them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line overrides applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<AdaptMode>,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let patch: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        if !patch.is_object() {
            return Err(CliError::Config(format!("{origin}: top level must be an object")));
        }
        let mut base = serde_json::to_value(Self::default()).expect("default config serializes");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies overrides and the settings a mode implies, then validates.
    pub fn finalize(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = o.seed {
            self.prior.seed = seed;
            self.pretrain.seed = seed;
            self.adapt.seed = seed;
        }
        let mode = o.mode.unwrap_or(self.adapt.mode);
        self.adapt = self.adapt.with_mode(mode);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.pretrain.phase != Phase::Pretrain {
            return bad("pretrain.phase must be \"pretrain\"".into());
        }
        if self.adapt.phase != Phase::Adapt {
            return bad("adapt.phase must be \"adapt\"".into());
        }
        for (name, t) in [("pretrain", &self.pretrain), ("adapt", &self.adapt)] {
            if let Err(e) = t.validate() {
                return bad(format!("{name}: {e}"));
            }
        }
        let a = &self.eval.alphas;
        if a.is_empty() || a.iter().any(|x| !(*x > 0.0)) || a.windows(2).any(|w| w[1] <= w[0]) {
            return bad("eval.alphas must be positive and strictly ascending".into());
        }
        if self.prior.latent_dim == 0 || self.prior.steps == 0 || self.prior.batch_size == 0 {
            return bad("prior.latent_dim, prior.steps and prior.batch_size must be positive".into());
        }
        if !self.paths.adapt.contains("{mode}") {
            return bad("paths.adapt must contain {mode}".into());
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
