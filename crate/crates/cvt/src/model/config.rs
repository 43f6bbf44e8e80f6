//! Declarative model descriptions and the published presets.

use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::layers::{ConvEmbedSpec, ConvProjSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub embed: ConvEmbedSpec,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub proj: ConvProjSpec,
    #[serde(default)]
    pub with_cls_token: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CvtError::Config("stages: at least one required".into()));
        }
        if self.num_classes == 0 {
            return Err(CvtError::Config("num_classes: must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(CvtError::Config("input_channels: must be >= 1".into()));
        }
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            s.embed.validate()?;
            s.proj.validate()?;
            if s.num_blocks == 0 {
                return Err(CvtError::Config(format!("stage {}: num_blocks must be >= 1", i + 1)));
            }
            if s.embed.out_channels != s.embed_dim {
                return Err(CvtError::Config(format!(
                    "stage {}: embed.out_channels {} must equal embed_dim {}",
                    i + 1,
                    s.embed.out_channels,
                    s.embed_dim
                )));
            }
            if s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                return Err(CvtError::Config(format!(
                    "stage {}: embed_dim {} not divisible by num_heads {}",
                    i + 1,
                    s.embed_dim,
                    s.num_heads
                )));
            }
            if s.with_cls_token != (i == last) {
                return Err(CvtError::Config(format!(
                    "stage {}: with_cls_token must be set exactly on the final stage",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Look up a compiled-in preset by name.
    pub fn preset(name: &str) -> Option<ModelConfig> {
        match name {
            "cvt13" => Some(cvt13()),
            "cvt21" => Some(cvt21()),
            "cvtw24" => Some(cvtw24()),
            "tiny" => Some(tiny()),
            _ => None,
        }
    }
}

fn stage(
    embed: ConvEmbedSpec,
    num_blocks: usize,
    num_heads: usize,
    embed_dim: usize,
    with_cls_token: bool,
) -> StageConfig {
    StageConfig {
        embed,
        num_blocks,
        num_heads,
        embed_dim,
        mlp_ratio: 4,
        proj: ConvProjSpec::default(),
        with_cls_token,
    }
}

fn three_stage(
    name: &str,
    dims: [usize; 3],
    heads: [usize; 3],
    blocks: [usize; 3],
    num_classes: usize,
) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        stages: vec![
            stage(ConvEmbedSpec::new(7, 4, 3, dims[0]), blocks[0], heads[0], dims[0], false),
            stage(ConvEmbedSpec::new(3, 2, 1, dims[1]), blocks[1], heads[1], dims[1], false),
            stage(ConvEmbedSpec::new(3, 2, 1, dims[2]), blocks[2], heads[2], dims[2], true),
        ],
        num_classes,
        input_channels: 3,
    }
}

/// CvT-13: 1+2+10 blocks, dims 64/192/384, heads 1/3/6.
pub fn cvt13() -> ModelConfig {
    three_stage("cvt13", [64, 192, 384], [1, 3, 6], [1, 2, 10], 1000)
}

/// CvT-21: 1+4+16 blocks, dims 64/192/384, heads 1/3/6.
pub fn cvt21() -> ModelConfig {
    three_stage("cvt21", [64, 192, 384], [1, 3, 6], [1, 4, 16], 1000)
}

/// CvT-W24: 2+2+20 blocks, wide dims 192/768/1024, heads 3/12/16.
pub fn cvtw24() -> ModelConfig {
    three_stage("cvtw24", [192, 768, 1024], [3, 12, 16], [2, 2, 20], 1000)
}

/// Desk-scale model for the synthetic training task: dims 16/32/64,
/// blocks 1/1/2, heads 1/2/4, 4 classes.
pub fn tiny() -> ModelConfig {
    three_stage("tiny", [16, 32, 64], [1, 2, 4], [1, 1, 2], 4)
}

/// Arbitrary small three-stage config for tests and enumeration.
pub fn toy_config(
    dims: [usize; 3],
    heads: [usize; 3],
    blocks: [usize; 3],
    num_classes: usize,
) -> ModelConfig {
    three_stage("toy", dims, heads, blocks, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["cvt13", "cvt21", "cvtw24", "tiny"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("cvt99").is_none());
    }

    #[test]
    fn cls_token_outside_final_stage_is_rejected() {
        let mut cfg = cvt13();
        cfg.stages[0].with_cls_token = true;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("cls"), "{err}");
    }

    #[test]
    fn mismatched_embed_channels_are_rejected() {
        let mut cfg = cvt13();
        cfg.stages[1].embed.out_channels = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = cvt13();
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
