//! TOML run-configuration file: a `[model]` section (preset name or explicit
//! stages) and an optional `[train]` section. Unknown keys are rejected, and
//! explicit stages conflict with a named preset instead of overriding it.

use serde::Deserialize;

use cvt::error::{CvtError, Result};
use cvt::model::{ModelConfig, StageConfig};
use cvt::train::TrainHyper;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub stage: Vec<StageConfig>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub input_channels: Option<usize>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default)]
    pub warmup_frac: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub image_size: Option<usize>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub data_seed: Option<u64>,
}

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_NOISE: f64 = 0.25;
pub const DEFAULT_DATA_SEED: u64 = 2024;

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CvtError::Config(format!("config file: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut config = match (&m.preset, m.stage.is_empty()) {
            (Some(name), true) => ModelConfig::preset(name)
                .ok_or_else(|| CvtError::Config(format!("unknown preset '{name}'")))?,
            (Some(name), false) => {
                return Err(CvtError::Config(format!(
                    "preset '{name}' conflicts with explicit [[model.stage]] entries"
                )))
            }
            (None, false) => ModelConfig {
                name: m.name.clone().unwrap_or_else(|| "custom".to_string()),
                stages: m.stage.clone(),
                num_classes: 1000,
                input_channels: 3,
            },
            (None, true) => {
                return Err(CvtError::Config(
                    "model section needs either a preset or [[model.stage]] entries".into(),
                ))
            }
        };
        if let Some(k) = m.num_classes {
            config.num_classes = k;
        }
        if let Some(c) = m.input_channels {
            config.input_channels = c;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn hyper(&self) -> TrainHyper {
        let d = TrainHyper::default();
        TrainHyper {
            steps: self.train.steps.unwrap_or(d.steps),
            batch_size: self.train.batch_size.unwrap_or(d.batch_size),
            base_lr: self.train.base_lr.unwrap_or(d.base_lr),
            warmup_frac: self.train.warmup_frac.unwrap_or(d.warmup_frac),
            weight_decay: self.train.weight_decay.unwrap_or(d.weight_decay),
            shuffle_labels: false,
        }
    }

    pub fn image_size(&self) -> usize {
        self.train.image_size.unwrap_or(DEFAULT_IMAGE_SIZE)
    }

    pub fn noise(&self) -> f64 {
        self.train.noise.unwrap_or(DEFAULT_NOISE)
    }

    pub fn data_seed(&self) -> u64 {
        self.train.data_seed.unwrap_or(DEFAULT_DATA_SEED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let cfg = ConfigFile::parse("[model]\npreset = \"tiny\"\nnum_classes = 7\n").unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.name, "tiny");
        assert_eq!(model.num_classes, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::parse("[model]\npreset = \"tiny\"\nfrobnicate = 1\n").is_err());
    }

    #[test]
    fn preset_conflicts_with_explicit_stages() {
        let text = r#"
[model]
preset = "tiny"

[[model.stage]]
embed = { kernel = 7, stride = 4, padding = 3, out_channels = 8 }
num_blocks = 1
num_heads = 1
embed_dim = 8
mlp_ratio = 4
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        assert!(cfg.model_config().is_err());
    }

    #[test]
    fn explicit_stages_build_a_custom_model() {
        let text = r#"
[model]
num_classes = 5

[[model.stage]]
embed = { kernel = 7, stride = 4, padding = 3, out_channels = 8 }
num_blocks = 1
num_heads = 1
embed_dim = 8
mlp_ratio = 4

[[model.stage]]
embed = { kernel = 3, stride = 2, padding = 1, out_channels = 16 }
num_blocks = 1
num_heads = 2
embed_dim = 16
mlp_ratio = 4

[[model.stage]]
embed = { kernel = 3, stride = 2, padding = 1, out_channels = 32 }
num_blocks = 1
num_heads = 4
embed_dim = 32
mlp_ratio = 4
with_cls_token = true
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.num_classes, 5);
        assert_eq!(model.stages.len(), 3);
    }
}
