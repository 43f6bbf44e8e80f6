//! Convolutional projection: the depthwise-separable convolution
//! (depth-wise conv → batch norm → point-wise map) that replaces ViT's
//! position-wise linear projection for the Q/K/V inputs.
//!
//! The depth-wise and batch-norm steps are spatial, so they apply to the
//! token grid only; a cls token bypasses them and rejoins for the point-wise
//! map. With kernel 1, stride 1, and identity normalization the whole layer
//! degenerates to exactly the position-wise linear projection.

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

use super::init::{trunc_normal, INIT_STD};
use super::norm::BatchNorm2d;

/// Shared projection geometry for a block's Q/K/V branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvProjSpec {
    pub kernel: usize,
    pub stride_q: usize,
    pub stride_kv: usize,
    pub padding: usize,
}

impl Default for ConvProjSpec {
    fn default() -> Self {
        ConvProjSpec {
            kernel: 3,
            stride_q: 1,
            stride_kv: 2,
            padding: 1,
        }
    }
}

impl ConvProjSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride_q != 1 {
            return Err(CvtError::Config(format!(
                "query projection stride must be 1, got {}",
                self.stride_q
            )));
        }
        if !matches!(self.stride_kv, 1 | 2) {
            return Err(CvtError::Config(format!(
                "key/value projection stride must be 1 or 2, got {}",
                self.stride_kv
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(CvtError::Config(format!(
                "projection kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Token-grid extent after a projection with the given stride.
    pub fn output_extent(&self, input: usize, stride: usize) -> Result<usize> {
        crate::tensor::conv_extent(input, self.kernel, stride, self.padding, "projection grid")
    }
}

/// One projection branch (q, k, or v) with its own stride.
pub struct ConvProjection<T: Float> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Depth-wise weights `C×1×s×s`, no bias (the batch norm absorbs it).
    pub depthwise: Tensor<T>,
    pub bn: BatchNorm2d<T>,
    /// Point-wise `C_in×C_out` map, no bias.
    pub pointwise: Tensor<T>,
}

impl<T: Float> ConvProjection<T> {
    pub fn new(dim: usize, kernel: usize, stride: usize, padding: usize, rng: &mut StdRng) -> Self {
        let depthwise = Tensor::param(
            trunc_normal(rng, dim * kernel * kernel, INIT_STD),
            &[dim, 1, kernel, kernel],
        )
        .unwrap();
        let pointwise = Tensor::param(trunc_normal(rng, dim * dim, INIT_STD), &[dim, dim]).unwrap();
        ConvProjection {
            kernel,
            stride,
            padding,
            depthwise,
            bn: BatchNorm2d::new(dim),
            pointwise,
        }
    }

    /// Project spatial `tokens` (`B×T×C`, `T == h·w`) and an optional cls
    /// token. Returns the projected tokens (cls first when present) and the
    /// output grid extents.
    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        h: usize,
        w: usize,
        cls: Option<&Tensor<T>>,
        training: bool,
    ) -> Result<(Tensor<T>, usize, usize)> {
        let (b, t, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        if t != h * w {
            return Err(CvtError::Contract(format!(
                "conv projection expects T == H·W, got T={} for grid {}×{}",
                t, h, w
            )));
        }
        // tokens → 2-D map
        let map = tokens.transpose(1, 2)?.reshape(&[b, c, h, w])?;
        let conv = map.conv2d(&self.depthwise, None, self.stride, self.padding, c)?;
        let (h2, w2) = (conv.shape()[2], conv.shape()[3]);
        let normed = self.bn.forward(&conv, training)?;
        // map → tokens
        let spatial = normed.reshape(&[b, c, h2 * w2])?.transpose(1, 2)?;
        let joined = match cls {
            Some(cls) => Tensor::concat(&[cls, &spatial], 1)?,
            None => spatial,
        };
        let t_out = joined.shape()[1];
        let projected = joined
            .reshape(&[b * t_out, c])?
            .matmul(&self.pointwise)?
            .reshape(&[b, t_out, c])?;
        Ok((projected, h2, w2))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.depthwise.weight"), &self.depthwise);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
        f(format!("{prefix}.pointwise.weight"), &self.pointwise);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.depthwise.weight"), &mut self.depthwise);
        self.bn.visit_params_mut(&format!("{prefix}.bn"), f);
        f(format!("{prefix}.pointwise.weight"), &mut self.pointwise);
    }

    pub fn visit_buffers_mut(&self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.bn.visit_buffers_mut(&format!("{prefix}.bn"), f);
    }
}

/// Build the ViT-degenerate variant: kernel 1, stride 1, all-ones depthwise
/// kernel, and an identity batch norm (eps 0, stats (0, 1)). Applying it in
/// eval mode is numerically the position-wise linear projection.
pub fn degenerate_projection<T: Float>(dim: usize, rng: &mut StdRng) -> ConvProjection<T> {
    let mut proj = ConvProjection::new(dim, 1, 1, 0, rng);
    proj.depthwise = Tensor::param(vec![T::ONE; dim], &[dim, 1, 1, 1]).unwrap();
    proj.bn.eps = 0.0;
    proj
}
