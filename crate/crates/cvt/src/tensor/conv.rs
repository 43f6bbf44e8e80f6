//! 2-D convolution kernels (grouped, strided, zero-padded) via im2col.

use crate::error::{CvtError, Result};
use crate::float::Float;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};

/// Resolved convolution geometry shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent of Eq.-style floor arithmetic; errors when non-positive.
pub(crate) fn conv_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    axis: &'static str,
) -> Result<usize> {
    let padded = input as i64 + 2 * padding as i64 - kernel as i64;
    if padded < 0 {
        return Err(CvtError::Geometry {
            axis,
            detail: format!(
                "input {} with padding {} cannot fit kernel {}",
                input, padding, kernel
            ),
        });
    }
    Ok(padded as usize / stride + 1)
}

impl ConvGeom {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(CvtError::Contract(format!(
                "conv2d input must be B×C×H×W, got {:?}",
                x_shape
            )));
        }
        if w_shape.len() != 4 || w_shape[2] != w_shape[3] {
            return Err(CvtError::Contract(format!(
                "conv2d weight must be C_out×C_in/g×s×s, got {:?}",
                w_shape
            )));
        }
        if stride < 1 {
            return Err(CvtError::Contract("conv2d stride must be >= 1".into()));
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kernel) = (w_shape[0], w_shape[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(CvtError::Contract(format!(
                "conv2d groups {} must divide C_in {} and C_out {}",
                groups, c_in, c_out
            )));
        }
        if w_shape[1] != c_in / groups {
            return Err(CvtError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let h_out = conv_extent(h, kernel, stride, padding, "height")?;
        let w_out = conv_extent(w, kernel, stride, padding, "width")?;
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kernel,
            stride,
            padding,
            groups,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// im2col rows per image: one row per (channel, ki, kj).
    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfold one image `x[C×H×W]` into `col[C·s·s × H'·W']` with zero padding.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.kernel);
    let cols = g.cols();
    col.fill(T::ZERO);
    for c in 0..g.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * cols;
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as i64 - g.padding as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as i64 - g.padding as i64;
                        if iw < 0 || iw >= w as i64 {
                            continue;
                        }
                        col[row + oh * g.w_out + ow] = plane[ih * w + iw as usize];
                    }
                }
            }
        }
    }
}

/// Fold `col` gradients back onto one image, accumulating overlaps.
fn col2im_acc<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.kernel);
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * cols;
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as i64 - g.padding as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as i64 - g.padding as i64;
                        if iw < 0 || iw >= w as i64 {
                            continue;
                        }
                        plane[ih * w + iw as usize] += col[row + oh * g.w_out + ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let cols = g.cols();
    let cg_in = g.c_in / g.groups;
    let cg_out = g.c_out / g.groups;
    let k_rows = cg_in * g.kernel * g.kernel;
    let mut out = vec![T::ZERO; g.batch * g.c_out * cols];
    let mut col = vec![T::ZERO; g.col_rows() * cols];
    let image = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(&x[b * image..(b + 1) * image], g, &mut col);
        for grp in 0..g.groups {
            let wg = &weight[grp * cg_out * k_rows..(grp + 1) * cg_out * k_rows];
            let colg = &col[grp * cg_in * g.kernel * g.kernel * cols
                ..(grp + 1) * cg_in * g.kernel * g.kernel * cols];
            let og = &mut out[(b * g.c_out + grp * cg_out) * cols
                ..(b * g.c_out + (grp + 1) * cg_out) * cols];
            gemm_nn(cg_out, k_rows, cols, wg, colg, og);
        }
        if let Some(bias) = bias {
            for c in 0..g.c_out {
                let bv = bias[c];
                for o in &mut out[(b * g.c_out + c) * cols..(b * g.c_out + c + 1) * cols] {
                    *o += bv;
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input.
pub(crate) fn conv2d_backward_x<T: Float>(d_out: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let cg_in = g.c_in / g.groups;
    let cg_out = g.c_out / g.groups;
    let k_rows = cg_in * g.kernel * g.kernel;
    let image = g.c_in * g.h * g.w;
    let mut dx = vec![T::ZERO; g.batch * image];
    let mut dcol = vec![T::ZERO; g.col_rows() * cols];
    for b in 0..g.batch {
        dcol.fill(T::ZERO);
        for grp in 0..g.groups {
            let wg = &weight[grp * cg_out * k_rows..(grp + 1) * cg_out * k_rows];
            let dog =
                &d_out[(b * g.c_out + grp * cg_out) * cols..(b * g.c_out + (grp + 1) * cg_out) * cols];
            let dcolg = &mut dcol[grp * k_rows * cols..(grp + 1) * k_rows * cols];
            // dcol[k_rows×cols] = wgᵀ[k_rows×cg_out] · d_out[cg_out×cols]
            gemm_tn(k_rows, cg_out, cols, wg, dog, dcolg);
        }
        col2im_acc(&dcol, g, &mut dx[b * image..(b + 1) * image]);
    }
    dx
}

/// Gradient w.r.t. the weight (accumulated over the batch).
pub(crate) fn conv2d_backward_w<T: Float>(d_out: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let cg_in = g.c_in / g.groups;
    let cg_out = g.c_out / g.groups;
    let k_rows = cg_in * g.kernel * g.kernel;
    let image = g.c_in * g.h * g.w;
    let mut dw = vec![T::ZERO; g.c_out * k_rows];
    let mut col = vec![T::ZERO; g.col_rows() * cols];
    for b in 0..g.batch {
        im2col(&x[b * image..(b + 1) * image], g, &mut col);
        for grp in 0..g.groups {
            let dog =
                &d_out[(b * g.c_out + grp * cg_out) * cols..(b * g.c_out + (grp + 1) * cg_out) * cols];
            let colg = &col[grp * k_rows * cols..(grp + 1) * k_rows * cols];
            let dwg = &mut dw[grp * cg_out * k_rows..(grp + 1) * cg_out * k_rows];
            // dw[cg_out×k_rows] += d_out[cg_out×cols] · colᵀ[cols×k_rows]
            gemm_nt(cg_out, cols, k_rows, dog, colg, dwg);
        }
    }
    dw
}

/// Gradient w.r.t. the bias: sum over batch and spatial positions.
pub(crate) fn conv2d_backward_bias<T: Float>(d_out: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut db = vec![T::ZERO; g.c_out];
    for b in 0..g.batch {
        for c in 0..g.c_out {
            let slice = &d_out[(b * g.c_out + c) * cols..(b * g.c_out + c + 1) * cols];
            let mut acc = T::ZERO;
            for &v in slice {
                acc += v;
            }
            db[c] += acc;
        }
    }
    db
}
