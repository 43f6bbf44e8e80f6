//! Convolutional token embedding: an overlapping strided convolution on the
//! 2-D token map, flattened row-major and layer-normalized. Each stage starts
//! with one, shrinking the grid while widening the channels.

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

use super::init::{trunc_normal, INIT_STD};
use super::norm::LayerNorm;

/// Geometry of one token-embedding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvEmbedSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

impl ConvEmbedSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, out_channels: usize) -> Self {
        ConvEmbedSpec {
            kernel,
            stride,
            padding,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 {
            return Err(CvtError::Config("embed kernel must be >= 1".into()));
        }
        if self.stride < 1 || self.stride > self.kernel {
            return Err(CvtError::Config(format!(
                "embed stride {} must be in 1..={} (overlapping convolution)",
                self.stride, self.kernel
            )));
        }
        if self.out_channels < 1 {
            return Err(CvtError::Config("embed out_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Token-grid extents produced from an input grid.
    ///
    /// The unpadded input must cover the kernel at least once (an image
    /// smaller than the first kernel has no full receptive field); beyond
    /// that the floor arithmetic applies.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel {
            return Err(CvtError::Geometry {
                axis: "height",
                detail: format!("input {} smaller than embedding kernel {}", h, self.kernel),
            });
        }
        if w < self.kernel {
            return Err(CvtError::Geometry {
                axis: "width",
                detail: format!("input {} smaller than embedding kernel {}", w, self.kernel),
            });
        }
        let out = |extent: usize| (extent + 2 * self.padding - self.kernel) / self.stride + 1;
        Ok((out(h), out(w)))
    }
}

pub struct ConvTokenEmbed<T: Float> {
    pub spec: ConvEmbedSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Float> ConvTokenEmbed<T> {
    pub fn new(spec: ConvEmbedSpec, in_channels: usize, rng: &mut StdRng) -> Self {
        let c = spec.out_channels;
        let k = spec.kernel;
        let weight = Tensor::param(
            trunc_normal(rng, c * in_channels * k * k, INIT_STD),
            &[c, in_channels, k, k],
        )
        .unwrap();
        let bias = Tensor::param(vec![T::ZERO; c], &[c]).unwrap();
        ConvTokenEmbed {
            spec,
            weight,
            bias,
            norm: LayerNorm::new(c),
        }
    }

    /// `B×C×H×W → (B×(H'·W')×C', H', W')`: conv, row-major flatten, layernorm.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (h2, w2) = self.spec.output_hw(h, w)?;
        let y = x.conv2d(
            &self.weight,
            Some(&self.bias),
            self.spec.stride,
            self.spec.padding,
            1,
        )?;
        let b = y.shape()[0];
        let c = self.spec.out_channels;
        let tokens = y.reshape(&[b, c, h2 * w2])?.transpose(1, 2)?;
        Ok((self.norm.forward(&tokens)?, h2, w2))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.conv.weight"), &self.weight);
        f(format!("{prefix}.conv.bias"), &self.bias);
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.conv.weight"), &mut self.weight);
        f(format!("{prefix}.conv.bias"), &mut self.bias);
        self.norm.visit_params_mut(&format!("{prefix}.norm"), f);
    }
}
