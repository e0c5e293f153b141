//! Run configuration: one strict TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::CaptureConfig;
use crate::data::DataConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_FEATURIZER_SEED;
use crate::network::{Architecture, ModelConfig};
use crate::sampling::SamplerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub dropout: f64,
    pub input_size: usize,
    pub fused_width_per_level: Option<Vec<usize>>,
    pub norm_groups: usize,
    pub mri_conditioning: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            base_channels: m.base_channels,
            channel_multipliers: m.channel_multipliers,
            attention_levels: m.attention_levels,
            num_res_blocks_per_level: m.num_res_blocks_per_level,
            dropout: m.dropout,
            input_size: m.input_size,
            fused_width_per_level: m.fused_width_per_level,
            norm_groups: m.norm_groups,
            mri_conditioning: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switch {
    pub enabled: bool,
}

impl Default for Switch {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub shared_single: bool,
    pub asymmetric_dropout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub featurizer_seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { featurizer_seed: DEFAULT_FEATURIZER_SEED }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Layer ids without branch prefix, e.g. `enc.l1`, `dec.out`.
    pub layers: Vec<String>,
    pub capture_timestep: usize,
    pub n_samples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { layers: Vec::new(), capture_timestep: 1, n_samples: 64 }
    }
}

/// Inputs consumed by the workflows. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// Second prediction directory for paired tests in `evaluate`.
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub task2: Switch,
    pub hff: Switch,
    pub decoders: DecoderSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub metrics: MetricsSection,
    pub analysis: AnalysisSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            task2: Switch::default(),
            hff: Switch::default(),
            decoders: DecoderSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsSection::default(),
            analysis: AnalysisSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, applies overrides, and resolves relative paths against
    /// the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoint, &mut cfg.paths.predictions, &mut cfg.paths.baseline] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seeds();
    }

    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            mri_conditioning: self.model.mri_conditioning,
            task2: self.task2.enabled,
            hff: self.hff.enabled,
            shared_single_decoder: self.decoders.shared_single,
            asymmetric_dropout: self.decoders.asymmetric_dropout,
        }
    }

    /// Applies the switch preset of ablation variant `V{n}`.
    pub fn set_variant(&mut self, n: u8) -> Result<()> {
        let a = Architecture::variant(n)?;
        self.model.mri_conditioning = a.mri_conditioning;
        self.task2.enabled = a.task2;
        self.hff.enabled = a.hff;
        self.decoders.shared_single = a.shared_single_decoder;
        self.decoders.asymmetric_dropout = a.asymmetric_dropout;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            base_channels: m.base_channels,
            channel_multipliers: m.channel_multipliers.clone(),
            attention_levels: m.attention_levels.clone(),
            num_res_blocks_per_level: m.num_res_blocks_per_level,
            dropout: m.dropout,
            input_size: m.input_size,
            fused_width_per_level: m.fused_width_per_level.clone(),
            norm_groups: m.norm_groups,
            architecture: self.architecture(),
        }
    }

    pub fn capture_config(&self) -> CaptureConfig {
        CaptureConfig { timestep: self.analysis.capture_timestep, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.size != self.model.input_size {
            return Err(Error::Config(format!(
                "data.size = {} but model.input_size = {}",
                self.data.size, self.model.input_size
            )));
        }
        if let Some(s) = self.sampler.steps {
            if s == 0 || s > self.train.num_steps {
                return Err(Error::Config(format!("sampler.steps = {s} outside [1, {}]", self.train.num_steps)));
            }
        }
        let t = self.analysis.capture_timestep;
        if t == 0 || t > self.train.num_steps {
            return Err(Error::Config(format!("analysis.capture_timestep = {t} outside [1, {}]", self.train.num_steps)));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration, seeds included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Digest of every field of the resolved configuration.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// Digest of the fields that fix parameter shapes and the meaning of
    /// timesteps. Stored in checkpoints and checked on load.
    pub fn model_hash(&self) -> String {
        model_hash(&self.model_config(), self.train.num_steps, self.train.schedule)
    }
}

pub fn model_hash(model: &ModelConfig, num_steps: usize, schedule: ScheduleKind) -> String {
    let v = serde_json::json!({ "model": model, "num_steps": num_steps, "schedule": schedule.to_string() });
    sha256_hex(v.to_string().as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.architecture(), Architecture::full());
        assert_eq!(c.train.weights.lambda1, 0.4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[train]\nlearning_rat = 1.0\n", &[]), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("", &["hff.enable=false".into()]).is_err());
        assert!(RunConfig::from_toml_str("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = RunConfig::from_toml_str("", &[]).unwrap();
        let c = RunConfig::from_toml_str("", &["task2.enabled=false".into(), "hff.enabled=false".into(), "sampler.mri_active=false".into()])
            .unwrap();
        assert!(!c.task2.enabled && !c.hff.enabled && !c.sampler.mri_active);
        assert_ne!(base.config_hash(), c.config_hash());
        assert_ne!(base.model_hash(), c.model_hash());
        let only_sampler = RunConfig::from_toml_str("", &["sampler.steps=10".into()]).unwrap();
        assert_ne!(base.config_hash(), only_sampler.config_hash());
        assert_eq!(base.model_hash(), only_sampler.model_hash());
        assert_eq!(base.config_hash(), RunConfig::from_toml_str("", &[]).unwrap().config_hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        c.set_variant(3).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 42);
    }

    #[test]
    fn inconsistent_switches_rejected() {
        assert!(RunConfig::from_toml_str("", &["task2.enabled=false".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["data.size=32".into()]).is_err());
    }
}
