//! Experiment configuration: parsing, seed derivation and resolution.
//!
//! A config is a TOML file (or a manifest JSON, whose `config` field is a
//! resolved config). Every seed used by a run is derived from the master
//! `seed` by name; sections may repeat a derived seed but never choose
//! their own.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use modality_lab::interventions::{FreezeRemoveSpec, SweepConfig};
use modality_lab::model::ModelConfig;
use modality_lab::seed::derive_seed;
use modality_lab::trainer::TrainConfig;
use modality_lab::world::{Condition, Order, SpanRole, TextLabel, World, WorldConfig};
use modality_lab::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per (condition, text label) cell, balanced over target and order.
    pub n_episodes: usize,
    pub conditions: Vec<Condition>,
    pub text_labels: Vec<TextLabel>,
    pub orders: Vec<Order>,
    /// Also evaluate the label-indexed task.
    pub symbolic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: 500,
            conditions: vec![Condition::Unperturbed, Condition::Remove, Condition::Swap],
            text_labels: vec![TextLabel::Caption],
            orders: vec![Order::ImageFirst, Order::CaptionFirst],
            symbolic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_instances: usize,
    pub k: usize,
    pub permutations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_instances: 200,
            k: 3,
            permutations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeRemoveConfig {
    /// Boundaries to patch; all of `1..=n_layers` when absent.
    pub boundaries: Option<BTreeSet<usize>>,
    pub spans: Vec<SpanRole>,
    pub n_episodes: usize,
}

impl Default for FreezeRemoveConfig {
    fn default() -> Self {
        FreezeRemoveConfig {
            boundaries: None,
            spans: vec![SpanRole::ImgContent, SpanRole::CapContent],
            n_episodes: 500,
        }
    }
}

impl FreezeRemoveConfig {
    pub fn spec(&self, n_layers: usize) -> FreezeRemoveSpec {
        FreezeRemoveSpec {
            boundaries: self
                .boundaries
                .clone()
                .unwrap_or_else(|| (1..=n_layers).collect()),
            spans: self.spans.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionsConfig {
    pub freeze_remove: FreezeRemoveConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint read by the analysis commands.
    pub checkpoint: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probes: ProbeConfig,
    pub interventions: InterventionsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            probes: ProbeConfig::default(),
            interventions: InterventionsConfig::default(),
        }
    }
}

/// Named sub-seeds of one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub world: u64,
    pub model_init: u64,
    pub train: u64,
    pub eval: u64,
    pub probe: u64,
    pub sweep: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Seeds {
            master,
            world: derive_seed(master, "world"),
            model_init: derive_seed(master, "model-init"),
            train: derive_seed(master, "train"),
            eval: derive_seed(master, "eval"),
            probe: derive_seed(master, "probe"),
            sweep: derive_seed(master, "sweep"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Reads a TOML config or a manifest JSON and resolves it.
pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: serde_json::Value = if is_json {
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        manifest
            .get("config")
            .cloned()
            .ok_or_else(|| LabError::Config(format!("{}: manifest has no `config` field", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| LabError::Config(e.to_string()))?
    };
    from_value(value, overrides)
}

/// Parses a TOML string and resolves it.
pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let t: toml::Value = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
    from_value(serde_json::to_value(t).map_err(|e| LabError::Config(e.to_string()))?, overrides)
}

fn from_value(value: serde_json::Value, overrides: &Overrides) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_value(value.clone()).map_err(|e| LabError::Config(e.to_string()))?;
    resolve(cfg, &value, overrides)
}

fn explicit(value: &serde_json::Value, section: &str, key: &str) -> Option<serde_json::Value> {
    value.get(section)?.get(key).cloned()
}

/// Applies overrides, fills derived seeds and the vocabulary size, and
/// validates every section. `raw` is the parsed file, used to tell explicit
/// keys from defaults.
pub fn resolve(mut cfg: ExperimentConfig, raw: &serde_json::Value, overrides: &Overrides) -> Result<ExperimentConfig> {
    // Seeds written in the file (a manifest carries them) must be the ones
    // its own master seed derives; `--seed` then re-derives all of them.
    let file_seeds = Seeds::derive(cfg.seed);
    for (section, key, derived) in [
        ("world", "world_seed", file_seeds.world),
        ("model", "init_seed", file_seeds.model_init),
        ("train", "train_seed", file_seeds.train),
    ] {
        if let Some(v) = explicit(raw, section, key) {
            if v.as_u64() != Some(derived) {
                return Err(LabError::Config(format!(
                    "{section}.{key} is derived from the master seed ({derived}); set `seed` instead"
                )));
            }
        }
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(c) = &overrides.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    let seeds = Seeds::derive(cfg.seed);
    cfg.world.world_seed = seeds.world;
    cfg.model.init_seed = seeds.model_init;
    cfg.train.train_seed = seeds.train;

    let world = World::new(cfg.world.clone())?;
    let vocab = world.vocab().size();
    if let Some(v) = explicit(raw, "model", "vocab_size") {
        if v.as_u64() != Some(vocab as u64) {
            return Err(LabError::Config(format!(
                "model.vocab_size must match the world vocabulary ({vocab}); leave it out to fill it in"
            )));
        }
    }
    cfg.model.vocab_size = vocab;
    cfg.model.validate()?;
    if cfg.model.max_seq_len < world.max_prompt_len() {
        return Err(LabError::Config(format!(
            "model.max_seq_len {} is shorter than the longest prompt ({})",
            cfg.model.max_seq_len,
            world.max_prompt_len()
        )));
    }
    cfg.train.validate()?;
    if cfg.probes.k < 2 {
        return Err(LabError::Config("probes.k must be at least 2".into()));
    }
    if cfg.probes.permutations == 0 {
        return Err(LabError::Config("probes.permutations must be positive".into()));
    }
    cfg.interventions
        .freeze_remove
        .spec(cfg.model.n_layers)
        .validate(cfg.model.n_layers)?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    /// The default config, resolved.
    pub fn resolved_default() -> Result<Self> {
        let cfg = ExperimentConfig::default();
        resolve(cfg, &serde_json::Value::Null, &Overrides::default())
    }
}
