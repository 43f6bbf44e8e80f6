//! Full CvT models: stage configs, the published presets, forward pass, and
//! checkpoint serialization.

mod checkpoint;
mod config;

pub use checkpoint::{
    file_checksum, load_checkpoint, load_checkpoint_expect, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{cvt13, cvt21, cvtw24, tiny, toy_config, ModelConfig, StageConfig};

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{CvtError, Result};
use crate::float::Float;
use crate::layers::{
    AttnSpec, ConvTokenEmbed, ConvTransformerBlock, LayerNorm, Linear, Mode,
};
use crate::tensor::Tensor;

use crate::layers::init::{trunc_normal, INIT_STD};

pub struct Stage<T: Float> {
    pub embed: ConvTokenEmbed<T>,
    pub blocks: Vec<ConvTransformerBlock<T>>,
}

pub struct CvtModel<T: Float = f32> {
    pub config: ModelConfig,
    pub stages: Vec<Stage<T>>,
    /// Learned classification token, `1×1×D_last`; exists only in the final
    /// stage's parameter set.
    pub cls_token: Tensor<T>,
    pub head_norm: LayerNorm<T>,
    pub head: Linear<T>,
    mode: Mode,
}

/// Deterministically initialize a model from a config and seed.
pub fn build_model<T: Float>(config: ModelConfig, seed: u64) -> Result<CvtModel<T>> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut in_channels = config.input_channels;
    for (i, sc) in config.stages.iter().enumerate() {
        let embed = ConvTokenEmbed::new(sc.embed, in_channels, &mut rng);
        let attn_spec = AttnSpec {
            embed_dim: sc.embed_dim,
            num_heads: sc.num_heads,
            with_cls_token: sc.with_cls_token,
        };
        let blocks = (0..sc.num_blocks)
            .map(|_| ConvTransformerBlock::new(attn_spec, sc.proj, sc.mlp_ratio, &mut rng))
            .collect();
        stages.push(Stage { embed, blocks });
        in_channels = sc.embed_dim;
        let _ = i;
    }
    let d_last = config.stages.last().unwrap().embed_dim;
    let cls_token = Tensor::param(trunc_normal(&mut rng, d_last, INIT_STD), &[1, 1, d_last])?;
    let head_norm = LayerNorm::new(d_last);
    let head = Linear::new(d_last, config.num_classes, true, &mut rng);
    Ok(CvtModel {
        config,
        stages,
        cls_token,
        head_norm,
        head,
        mode: Mode::Eval,
    })
}

impl<T: Float> CvtModel<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// `B×C×H×W images → B×num_classes logits` in the model's current mode.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_mode(images, self.mode)
    }

    pub fn forward_mode(&self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if images.shape().len() != 4 || images.shape()[1] != self.config.input_channels {
            return Err(CvtError::Contract(format!(
                "expected B×{}×H×W images, got {:?}",
                self.config.input_channels,
                images.shape()
            )));
        }
        let training = mode.is_train();
        let batch = images.shape()[0];
        let last = self.stages.len() - 1;
        let mut map = images.clone();
        let mut final_tokens = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let (mut tokens, h, w) = stage.embed.forward(&map)?;
            if i == last {
                let cls = self.cls_token.repeat_batch(batch)?;
                tokens = Tensor::concat(&[&cls, &tokens], 1)?;
            }
            for block in &stage.blocks {
                tokens = block.forward(&tokens, h, w, training)?;
            }
            if i == last {
                final_tokens = Some(tokens);
            } else {
                let dim = self.config.stages[i].embed_dim;
                map = tokens.transpose(1, 2)?.reshape(&[batch, dim, h, w])?;
            }
        }
        let tokens = final_tokens.expect("at least one stage");
        let d_last = self.config.stages[last].embed_dim;
        let cls = tokens.narrow(1, 0, 1)?.reshape(&[batch, d_last])?;
        self.head.forward(&self.head_norm.forward(&cls)?)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            let sp = format!("stage{}", i + 1);
            stage.embed.visit_params(&format!("{sp}.embed"), f);
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit_params(&format!("{sp}.block{j}"), f);
            }
        }
        f("cls_token".to_string(), &self.cls_token);
        self.head_norm.visit_params("head.norm", f);
        self.head.visit_params("head.linear", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let sp = format!("stage{}", i + 1);
            stage.embed.visit_params_mut(&format!("{sp}.embed"), f);
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params_mut(&format!("{sp}.block{j}"), f);
            }
        }
        f("cls_token".to_string(), &mut self.cls_token);
        self.head_norm.visit_params_mut("head.norm", f);
        self.head.visit_params_mut("head.linear", f);
    }

    /// Batch-norm running statistics, addressable by name.
    pub fn visit_buffers_mut(&self, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            let sp = format!("stage{}", i + 1);
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit_buffers_mut(&format!("{sp}.block{j}"), f);
            }
        }
    }

    /// Number of learnable scalars in the live model.
    pub fn num_params(&self) -> u64 {
        let mut total = 0u64;
        self.visit_params(&mut |_, t| total += t.numel() as u64);
        total
    }

    pub fn zero_grads(&self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_block_counts_match_names() {
        let total = |c: &ModelConfig| -> usize { c.stages.iter().map(|s| s.num_blocks).sum() };
        assert_eq!(total(&cvt13()), 13);
        assert_eq!(total(&cvt21()), 21);
        assert_eq!(total(&cvtw24()), 24);
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a: CvtModel<f32> = build_model(tiny(), 7).unwrap();
        let b: CvtModel<f32> = build_model(tiny(), 7).unwrap();
        let mut pa = Vec::new();
        a.visit_params(&mut |name, t| pa.push((name, t.data().to_vec())));
        let mut pb = Vec::new();
        b.visit_params(&mut |name, t| pb.push((name, t.data().to_vec())));
        assert_eq!(pa.len(), pb.len());
        for ((na, da), (nb, db)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert!(da.iter().zip(db).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c: CvtModel<f32> = build_model(tiny(), 8).unwrap();
        let mut pc = Vec::new();
        c.visit_params(&mut |name, t| pc.push((name, t.data().to_vec())));
        assert!(pa.iter().zip(&pc).any(|((_, da), (_, dc))| da != dc));
    }

    #[test]
    fn cls_token_only_in_final_stage() {
        let m: CvtModel<f32> = build_model(tiny(), 0).unwrap();
        let mut cls_names = Vec::new();
        m.visit_params(&mut |name, _| {
            if name.contains("cls") {
                cls_names.push(name);
            }
        });
        assert_eq!(cls_names, vec!["cls_token".to_string()]);
        assert_eq!(m.cls_token.shape(), &[1, 1, 64]);
    }

    #[test]
    fn toy_forward_and_backward_touch_every_parameter() {
        // dims 8/16/32, blocks 1/1/1, heads 1/2/4, 32×32 input
        let cfg = toy_config([8, 16, 32], [1, 2, 4], [1, 1, 1], 10);
        let mut m: CvtModel<f64> = build_model(cfg, 3).unwrap();
        m.set_mode(Mode::Train);
        let data: Vec<f64> = (0..2 * 3 * 32 * 32).map(|i| ((i as f64) * 0.011).sin()).collect();
        let images = Tensor::from_vec(data, &[2, 3, 32, 32]).unwrap();
        let logits = m.forward(&images).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        let loss = crate::tensor::cross_entropy(&logits, &[1, 7]).unwrap();
        loss.backward().unwrap();
        // The final block's spatial-query branch (depthwise + bn) is
        // structurally dead: the head reads only the cls token, which
        // bypasses the spatial steps. Everything else must receive signal.
        let last_block = m.config.stages[2].num_blocks - 1;
        let dead = format!("stage3.block{last_block}.attn.proj_q.");
        m.visit_params(&mut |name, t| {
            let grad = t.grad().unwrap_or_else(|| panic!("{name} got no grad"));
            let structurally_dead =
                name.starts_with(&dead) && !name.contains("pointwise");
            if structurally_dead {
                assert!(grad.iter().all(|&g| g == 0.0), "{name} expected dead");
            } else {
                assert!(
                    grad.iter().any(|&g| g != 0.0),
                    "{name} gradient is identically zero"
                );
            }
        });
    }

    #[test]
    fn variable_resolution_forward_needs_no_surgery() {
        let m: CvtModel<f32> = build_model(tiny(), 0).unwrap();
        for size in [32usize, 48, 64] {
            let images = Tensor::zeros(&[1, 3, size, size]);
            let logits = m.forward(&images).unwrap();
            assert_eq!(logits.shape(), &[1, 4]);
        }
        // Too small for the stage-1 kernel: geometry error.
        let images = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            m.forward(&images),
            Err(CvtError::Geometry { .. })
        ));
    }

    #[test]
    fn eval_forward_is_pure() {
        let m: CvtModel<f32> = build_model(tiny(), 1).unwrap();
        let data: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i as f32) * 0.07).cos()).collect();
        let images = Tensor::from_vec(data, &[1, 3, 32, 32]).unwrap();
        let a = m.forward(&images).unwrap();
        let b = m.forward(&images).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
