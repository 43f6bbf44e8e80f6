//! Forward implementations of every tensor operation.

use std::sync::Arc;

use crate::error::{CvtError, Result};
use crate::float::Float;

use super::autograd::Op;
use super::conv::{conv2d_forward, ConvGeom};
use super::gemm::gemm_nn;
use super::Tensor;

/// Materializing swap of two axes; returns (data, new shape).
pub(crate) fn transpose_two<T: Float>(
    data: &[T],
    shape: &[usize],
    d0: usize,
    d1: usize,
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(d0, d1);
    let mut out = vec![T::ZERO; data.len()];
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for o in out.iter_mut() {
        *o = data[in_off];
        for j in (0..rank).rev() {
            idx[j] += 1;
            in_off += in_strides[perm[j]];
            if idx[j] < out_shape[j] {
                break;
            }
            in_off -= in_strides[perm[j]] * out_shape[j];
            idx[j] = 0;
        }
    }
    (out, out_shape)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact Gaussian-CDF gelu: x · Φ(x).
fn gelu_value<T: Float>(x: T) -> T {
    let phi = (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf()) * T::from_f64(0.5);
    x * phi
}

/// d/dx gelu = Φ(x) + x·φ(x)
pub(crate) fn gelu_derivative<T: Float>(x: T) -> T {
    let cdf = (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf()) * T::from_f64(0.5);
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(INV_SQRT_2PI);
    cdf + x * pdf
}

impl<T: Float> Tensor<T> {
    fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CvtError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone()))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone()))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    /// Broadcast-add a `[C]` bias over the last axis of `[..., C]`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let c = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [c] {
            return Err(CvtError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let data: Vec<T> = self
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &b)| x + b))
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::AddBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        )
    }

    /// 2-D matrix product `[M×K]·[K×N] → [M×N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(CvtError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(m, k, n, self.data(), other.data(), &mut out);
        Tensor::from_op(
            out,
            vec![m, n],
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    /// Batched matrix product `[N×M×K]·[N×K×P] → [N×M×P]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 3
            || other.shape().len() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[1]
        {
            return Err(CvtError::ShapeMismatch {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (nb, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[2];
        let mut out = vec![T::ZERO; nb * m * n];
        for i in 0..nb {
            gemm_nn(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Tensor::from_op(
            out,
            vec![nb, m, n],
            Op::Bmm {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    /// Grouped, strided, zero-padded 2-D convolution.
    ///
    /// `self` is `B×C_in×H×W`, `weight` is `C_out×C_in/g×s×s`. With
    /// `groups == C_in == C_out` this is a depth-wise convolution; with
    /// `s == 1, groups == 1` it is point-wise.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let geom = ConvGeom::resolve(self.shape(), weight.shape(), stride, padding, groups)?;
        if let Some(b) = bias {
            if b.shape() != [geom.c_out] {
                return Err(CvtError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let out = conv2d_forward(self.data(), weight.data(), bias.map(|b| b.data()), &geom);
        Tensor::from_op(
            out,
            geom.out_shape(),
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                bias: bias.cloned(),
                geom,
            },
        )
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(CvtError::Contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                self.shape()
            )));
        }
        let shape = self.shape();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.data();
        let mut out = vec![T::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = xd[base];
                for l in 1..len {
                    max = max.maximum(xd[base + l * inner]);
                }
                let mut sum = T::ZERO;
                for l in 0..len {
                    let e = (xd[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let y = Arc::new(out.clone());
        Tensor::from_op(
            out,
            shape.to_vec(),
            Op::Softmax {
                x: self.clone(),
                axis,
                y,
            },
        )
    }

    /// Layer normalization over the last axis, then affine (gamma, beta).
    pub fn layernorm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or_else(|| {
            CvtError::Contract("layernorm requires at least one axis".into())
        })?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(CvtError::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / c;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let eps = T::from_f64(eps);
        let cn = T::from_usize(c);
        let mut out = vec![T::ZERO; xd.len()];
        let mut means = vec![T::ZERO; rows];
        let mut inv_stds = vec![T::ZERO; rows];
        for r in 0..rows {
            let xr = &xd[r * c..(r + 1) * c];
            let mut mu = T::ZERO;
            for &v in xr {
                mu += v;
            }
            mu /= cn;
            let mut var = T::ZERO;
            for &v in xr {
                let d = v - mu;
                var += d * d;
            }
            var /= cn;
            let istd = T::ONE / (var + eps).sqrt();
            means[r] = mu;
            inv_stds[r] = istd;
            let orow = &mut out[r * c..(r + 1) * c];
            for j in 0..c {
                orow[j] = (xr[j] - mu) * istd * gd[j] + bd[j];
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: Arc::new(means),
                inv_std: Arc::new(inv_stds),
            },
        )
    }

    /// 2-D batch normalization over `B×C×H×W`.
    ///
    /// In training mode normalizes with batch statistics over (B, H, W) and
    /// updates `running_mean`/`running_var` in place with `momentum`; in eval
    /// mode normalizes with the running statistics. Population (biased)
    /// variance is used for both.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<Tensor<T>> {
        if self.shape().len() != 4 {
            return Err(CvtError::Contract(format!(
                "batchnorm2d input must be B×C×H×W, got {:?}",
                self.shape()
            )));
        }
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c {
            return Err(CvtError::ShapeMismatch {
                op: "batchnorm2d",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let plane = h * w;
        let n = b * plane;
        let xd = self.data();
        let eps = T::from_f64(eps);
        let (mut means, mut inv_stds) = (vec![T::ZERO; c], vec![T::ZERO; c]);
        if training {
            let nn = T::from_usize(n);
            let mom = T::from_f64(momentum);
            for ch in 0..c {
                let mut mu = T::ZERO;
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for p in 0..plane {
                        mu += xd[base + p];
                    }
                }
                mu /= nn;
                let mut var = T::ZERO;
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for p in 0..plane {
                        let d = xd[base + p] - mu;
                        var += d * d;
                    }
                }
                var /= nn;
                running_mean[ch] = (T::ONE - mom) * running_mean[ch] + mom * mu;
                running_var[ch] = (T::ONE - mom) * running_var[ch] + mom * var;
                means[ch] = mu;
                inv_stds[ch] = T::ONE / (var + eps).sqrt();
            }
        } else {
            for ch in 0..c {
                means[ch] = running_mean[ch];
                inv_stds[ch] = T::ONE / (running_var[ch] + eps).sqrt();
            }
        }
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let (mu, istd) = (means[ch], inv_stds[ch]);
                let (gch, bch) = (gd[ch], bd[ch]);
                for p in 0..plane {
                    out[base + p] = (xd[base + p] - mu) * istd * gch + bch;
                }
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: Arc::new(means),
                inv_std: Arc::new(inv_stds),
                batch_stats: training,
            },
        )
    }

    /// Exact Gaussian-CDF gelu.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&x| gelu_value(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    /// Reinterpret the row-major data with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(CvtError::Contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        )
    }

    /// Swap two axes (materializing).
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if d0 >= rank || d1 >= rank {
            return Err(CvtError::Contract(format!(
                "transpose axes ({}, {}) out of range for shape {:?}",
                d0,
                d1,
                self.shape()
            )));
        }
        let (data, shape) = transpose_two(self.data(), self.shape(), d0, d1);
        Tensor::from_op(
            data,
            shape,
            Op::Transpose {
                x: self.clone(),
                d0,
                d1,
            },
        )
    }

    /// Concatenate tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| CvtError::Contract("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(CvtError::Contract(format!(
                "concat axis {} out of range for shape {:?}",
                axis,
                first.shape()
            )));
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != rank
                || (0..rank).any(|d| d != axis && p.shape()[d] != first.shape()[d])
            {
                return Err(CvtError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut offset = 0usize;
        for p in parts {
            let part_axis = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let src = o * part_axis * inner;
                out[dst..dst + part_axis * inner].copy_from_slice(&pd[src..src + part_axis * inner]);
            }
            offset += part_axis;
        }
        Tensor::from_op(
            out,
            out_shape,
            Op::Concat {
                parts: parts.iter().map(|&p| p.clone()).collect(),
                axis,
            },
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if axis >= rank || start + len > self.shape()[axis] {
            return Err(CvtError::Contract(format!(
                "narrow (axis {}, start {}, len {}) out of range for shape {:?}",
                axis,
                start,
                len,
                self.shape()
            )));
        }
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let full_axis = self.shape()[axis];
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let xd = self.data();
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = (o * full_axis + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        Tensor::from_op(
            out,
            out_shape,
            Op::Narrow {
                x: self.clone(),
                axis,
                start,
                len,
            },
        )
    }

    /// Tile a leading-1 tensor `[1, ...] → [n, ...]` (used for the cls token).
    pub fn repeat_batch(&self, n: usize) -> Result<Tensor<T>> {
        if self.shape().first() != Some(&1) {
            return Err(CvtError::Contract(format!(
                "repeat_batch requires a leading axis of 1, got {:?}",
                self.shape()
            )));
        }
        let chunk = self.numel();
        let mut out = Vec::with_capacity(chunk * n);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = n;
        Tensor::from_op(
            out,
            out_shape,
            Op::RepeatBatch {
                x: self.clone(),
                n,
            },
        )
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::from_op(vec![acc], Vec::new(), Op::SumAll(self.clone()))
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::ZERO;
        for &v in self.data() {
            acc += v;
        }
        acc /= T::from_usize(self.numel());
        Tensor::from_op(vec![acc], Vec::new(), Op::MeanAll(self.clone()))
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    if logits.shape().len() != 2 {
        return Err(CvtError::Contract(format!(
            "cross_entropy expects B×K logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(CvtError::Contract(format!(
            "cross_entropy got {} labels for batch {}",
            labels.len(),
            b
        )));
    }
    let xd = logits.data();
    let mut probs = vec![T::ZERO; b * k];
    let mut loss = T::ZERO;
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(CvtError::IndexOutOfRange {
                index: label,
                len: k,
            });
        }
        let row = &xd[bi * k..(bi + 1) * k];
        let mut max = row[0];
        for &v in &row[1..] {
            max = max.maximum(v);
        }
        let mut sum = T::ZERO;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[bi * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            probs[bi * k + j] /= sum;
        }
        let log_sum = sum.ln();
        loss -= row[label] - max - log_sum;
    }
    loss /= T::from_usize(b);
    Tensor::from_op(
        vec![loss],
        Vec::new(),
        Op::CrossEntropy {
            logits: logits.clone(),
            labels: Arc::new(labels.to_vec()),
            probs: Arc::new(probs),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::cross_entropy;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t64(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
        let out = eye.matmul(&eye).unwrap();
        assert_eq!(out.data(), eye.data());
    }

    #[test]
    fn matmul_small_case() {
        let a = t64(&[1., 2., 3., 4.], &[2, 2]);
        let b = t64(&[1., 1.], &[2, 1]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry() {
        let x = t64(&[0., 0., 0.], &[3]);
        let y = x.softmax(0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let x = t64(&[1000., 0.], &[2]);
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let x = t64(&data, &[4, 6]);
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn layernorm_constant_input_is_beta() {
        let x = t64(&[5., 5., 5., 5.], &[1, 4]);
        let gamma = t64(&[1.; 4], &[4]);
        let beta = t64(&[0.; 4], &[4]);
        let y = x.layernorm(&gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_two_point_row() {
        let x = t64(&[1., 3.], &[1, 2]);
        let gamma = t64(&[1., 1.], &[2]);
        let beta = t64(&[0., 0.], &[2]);
        let y = x.layernorm(&gamma, &beta, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_zero() {
        let x = t64(&[0.0], &[1]);
        assert_eq!(x.gelu().unwrap().data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let k = 7;
        let logits = t64(&vec![0.3; 2 * k], &[2, k]);
        let loss = cross_entropy(&logits, &[0, 4]).unwrap();
        assert!((loss.item() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = t64(&[0., 0.], &[1, 2]);
        assert!(cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn conv2d_full_support_sums_input() {
        // 1×1×3×3 input, all-ones 3×3 kernel, stride 1, no padding.
        let x = t64(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 1, 3, 3]);
        let w = t64(&[1.0; 9], &[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn conv2d_geometry_error_names_axis() {
        let x = t64(&[0.0; 4], &[1, 1, 2, 2]);
        let w = t64(&[0.0; 25], &[1, 1, 5, 5]);
        let err = x.conv2d(&w, None, 1, 0, 1).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn conv2d_paper_geometries() {
        // 7×7 stride 4 pad 3 on 224 → 56; 3×3 stride 2 pad 1 on 56 → 28.
        let x = Tensor::<f32>::zeros(&[1, 1, 224, 224]);
        let w = Tensor::<f32>::zeros(&[1, 1, 7, 7]);
        let y = x.conv2d(&w, None, 4, 3, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 56, 56]);
        let x = Tensor::<f32>::zeros(&[1, 1, 56, 56]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 28, 28]);
    }

    #[test]
    fn transpose_round_trip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = t64(&data, &[2, 3, 4]);
        let y = x.transpose(1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        let z = y.transpose(1, 2).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_narrow_round_trip() {
        let a = t64(&[1., 2., 3., 4.], &[2, 2]);
        let b = t64(&[5., 6.], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        let back = c.narrow(1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[cfg(debug_assertions)]
    #[test]
    fn debug_builds_flag_non_finite_op_results() {
        let x = t64(&[f64::INFINITY, 1.0], &[2]);
        let err = x.add(&x).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        // Two channels with mean 5, population variance 4.
        let x = t64(&[3., 7., 3., 7., 3., 7., 3., 7.], &[2, 2, 1, 2]);
        let gamma = t64(&[1., 1.], &[2]);
        let beta = t64(&[0., 0.], &[2]);
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let y = x
            .batchnorm2d(&gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5, true)
            .unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 8.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
        // running ← 0.9·init + 0.1·batch
        assert!((rm[0] - 0.5).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_with_identity_stats() {
        let x = t64(&[0.5, -1.5, 2.0, 0.0], &[1, 1, 2, 2]);
        let gamma = t64(&[1.], &[1]);
        let beta = t64(&[0.], &[1]);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = x
            .batchnorm2d(&gamma, &beta, &mut rm, &mut rv, 0.1, 0.0, false)
            .unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(rm, vec![0.0]);
    }
}
