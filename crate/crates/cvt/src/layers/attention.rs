//! Multi-head self-attention fed by convolutional projections, with the
//! squeezed (stride-2) key/value path making the attention matrix
//! rectangular: T_q × T_kv.

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

use super::block::Linear;
use super::projection::{ConvProjSpec, ConvProjection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnSpec {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub with_cls_token: bool,
}

impl AttnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(CvtError::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

pub struct MhsaConv<T: Float> {
    pub spec: AttnSpec,
    pub proj_q: ConvProjection<T>,
    pub proj_k: ConvProjection<T>,
    pub proj_v: ConvProjection<T>,
    pub out: Linear<T>,
}

impl<T: Float> MhsaConv<T> {
    pub fn new(spec: AttnSpec, proj: ConvProjSpec, rng: &mut StdRng) -> Self {
        let d = spec.embed_dim;
        let proj_q = ConvProjection::new(d, proj.kernel, proj.stride_q, proj.padding, rng);
        let proj_k = ConvProjection::new(d, proj.kernel, proj.stride_kv, proj.padding, rng);
        let proj_v = ConvProjection::new(d, proj.kernel, proj.stride_kv, proj.padding, rng);
        let out = Linear::new(d, d, true, rng);
        MhsaConv {
            spec,
            proj_q,
            proj_k,
            proj_v,
            out,
        }
    }

    /// `[B, T(+1 cls), D] → [B, T(+1 cls), D]`; also returns the attention
    /// weights `[B·H, T_q, T_kv]` for inspection.
    pub fn forward_with_attention(
        &self,
        tokens: &Tensor<T>,
        h: usize,
        w: usize,
        training: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = tokens.shape()[0];
        let d = self.spec.embed_dim;
        if tokens.shape()[2] != d {
            return Err(CvtError::ShapeMismatch {
                op: "mhsa",
                lhs: tokens.shape().to_vec(),
                rhs: vec![b, h * w, d],
            });
        }
        let (cls, spatial) = if self.spec.with_cls_token {
            let t = tokens.shape()[1];
            (
                Some(tokens.narrow(1, 0, 1)?),
                tokens.narrow(1, 1, t - 1)?,
            )
        } else {
            (None, tokens.clone())
        };
        let (q, _, _) = self.proj_q.forward(&spatial, h, w, cls.as_ref(), training)?;
        let (k, _, _) = self.proj_k.forward(&spatial, h, w, cls.as_ref(), training)?;
        let (v, _, _) = self.proj_v.forward(&spatial, h, w, cls.as_ref(), training)?;

        let heads = self.spec.num_heads;
        let head_dim = self.spec.head_dim();
        let split = |x: &Tensor<T>| -> Result<Tensor<T>> {
            let t = x.shape()[1];
            x.reshape(&[b, t, heads, head_dim])?
                .transpose(1, 2)?
                .reshape(&[b * heads, t, head_dim])
        };
        let (t_q, t_kv) = (q.shape()[1], k.shape()[1]);
        let qh = split(&q)?;
        let kh = split(&k)?;
        let vh = split(&v)?;

        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let scores = qh.scale(scale)?.bmm(&kh.transpose(1, 2)?)?;
        let attn = scores.softmax(2)?;
        let ctx = attn.bmm(&vh)?;
        let merged = ctx
            .reshape(&[b, heads, t_q, head_dim])?
            .transpose(1, 2)?
            .reshape(&[b, t_q, d])?;
        let out = self.out.forward(&merged)?;
        debug_assert_eq!(attn.shape(), &[b * heads, t_q, t_kv]);
        Ok((out, attn))
    }

    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        h: usize,
        w: usize,
        training: bool,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(tokens, h, w, training)?.0)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.proj_q.visit_params(&format!("{prefix}.proj_q"), f);
        self.proj_k.visit_params(&format!("{prefix}.proj_k"), f);
        self.proj_v.visit_params(&format!("{prefix}.proj_v"), f);
        self.out.visit_params(&format!("{prefix}.out"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.proj_q.visit_params_mut(&format!("{prefix}.proj_q"), f);
        self.proj_k.visit_params_mut(&format!("{prefix}.proj_k"), f);
        self.proj_v.visit_params_mut(&format!("{prefix}.proj_v"), f);
        self.out.visit_params_mut(&format!("{prefix}.out"), f);
    }

    pub fn visit_buffers_mut(&self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.proj_q.visit_buffers_mut(&format!("{prefix}.proj_q"), f);
        self.proj_k.visit_buffers_mut(&format!("{prefix}.proj_k"), f);
        self.proj_v.visit_buffers_mut(&format!("{prefix}.proj_v"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = StdRng::seed_from_u64(40);
        let spec = AttnSpec {
            embed_dim: 4,
            num_heads: 2,
            with_cls_token: false,
        };
        let proj = ConvProjSpec {
            kernel: 3,
            stride_q: 1,
            stride_kv: 1,
            padding: 1,
        };
        let attn = MhsaConv::<f64>::new(spec, proj, &mut rng);
        let tokens = Tensor::from_vec(vec![0.3, -0.4, 0.9, 0.1], &[1, 1, 4]).unwrap();
        let (out, weights) = attn.forward_with_attention(&tokens, 1, 1, false).unwrap();
        assert_eq!(weights.shape(), &[2, 1, 1]);
        assert_eq!(weights.data(), &[1.0, 1.0]);
        // output = out_linear(v)
        let (v, _, _) = attn.proj_v.forward(&tokens, 1, 1, None, false).unwrap();
        let want = attn.out.forward(&v).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn squeezed_attention_is_rectangular() {
        let mut rng = StdRng::seed_from_u64(41);
        let spec = AttnSpec {
            embed_dim: 2,
            num_heads: 1,
            with_cls_token: false,
        };
        let attn = MhsaConv::<f32>::new(spec, ConvProjSpec::default(), &mut rng);
        let tokens = Tensor::zeros(&[1, 64, 2]);
        let (out, weights) = attn.forward_with_attention(&tokens, 8, 8, false).unwrap();
        assert_eq!(weights.shape(), &[1, 64, 16]);
        assert_eq!(out.shape(), &[1, 64, 2]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(42);
        let spec = AttnSpec {
            embed_dim: 6,
            num_heads: 3,
            with_cls_token: false,
        };
        let attn = MhsaConv::<f64>::new(spec, ConvProjSpec::default(), &mut rng);
        let data: Vec<f64> = (0..2 * 16 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tokens = Tensor::from_vec(data, &[2, 16, 6]).unwrap();
        let (_, weights) = attn.forward_with_attention(&tokens, 4, 4, false).unwrap();
        let t_kv = *weights.shape().last().unwrap();
        for row in weights.data().chunks(t_kv) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
