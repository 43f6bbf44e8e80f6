//! Recorded operations and the reverse-mode gradient tape.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{CvtError, Result};
use crate::float::Float;

use super::conv::{conv2d_backward_bias, conv2d_backward_w, conv2d_backward_x, ConvGeom};
use super::gemm::{gemm_nt, gemm_tn};
use super::ops::{gelu_derivative, transpose_two};
use super::Tensor;

/// One recorded operation: the output node keeps handles to its inputs plus
/// whatever activations its backward rule needs.
pub(crate) enum Op<T: Float> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddBias {
        x: Tensor<T>,
        bias: Tensor<T>,
    },
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Bmm {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        bias: Option<Tensor<T>>,
        geom: ConvGeom,
    },
    Softmax {
        x: Tensor<T>,
        axis: usize,
        y: Arc<Vec<T>>,
    },
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Arc<Vec<T>>,
        inv_std: Arc<Vec<T>>,
    },
    BatchNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Arc<Vec<T>>,
        inv_std: Arc<Vec<T>>,
        /// True when normalized with batch statistics (training mode); the
        /// backward pass then differentiates through mean and variance.
        batch_stats: bool,
    },
    Gelu(Tensor<T>),
    Reshape(Tensor<T>),
    Transpose {
        x: Tensor<T>,
        d0: usize,
        d1: usize,
    },
    Concat {
        parts: Vec<Tensor<T>>,
        axis: usize,
    },
    Narrow {
        x: Tensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    },
    RepeatBatch {
        x: Tensor<T>,
        n: usize,
    },
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    CrossEntropy {
        logits: Tensor<T>,
        labels: Arc<Vec<usize>>,
        probs: Arc<Vec<T>>,
    },
}

impl<T: Float> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Gelu(..) => "gelu",
            Op::Reshape(..) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::RepeatBatch { .. } => "repeat_batch",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::MeanAll(x) => vec![x],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Matmul { a, b } | Op::Bmm { a, b } => vec![a, b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Transpose { x, .. } | Op::Narrow { x, .. } | Op::RepeatBatch { x, .. } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

/// Inspectable view of one tape entry, for tests and debugging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeEntry {
    pub output_id: u64,
    pub input_ids: Vec<u64>,
    pub op: &'static str,
}

/// The gradient tape: every tracked operation reachable from a root, in
/// recording order. Tensor ids increase monotonically with creation, so
/// ascending-id order is the recording order and reversing it yields a valid
/// reverse-topological replay.
pub struct GradTape<T: Float> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Float> GradTape<T> {
    /// Collect the tracked subgraph below `root`.
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack: Vec<Tensor<T>> = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            for input in t.op().inputs() {
                stack.push(input.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        GradTape { nodes }
    }

    /// Recorded (non-leaf) operations in recording order.
    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .filter(|t| !t.is_leaf())
            .map(|t| TapeEntry {
                output_id: t.id(),
                input_ids: t.op().inputs().iter().map(|i| i.id()).collect(),
                op: t.op().name(),
            })
            .collect()
    }

    /// Output ids in the order the backward replay visits them.
    pub fn replay_order(&self) -> Vec<u64> {
        self.nodes
            .iter()
            .rev()
            .filter(|t| !t.is_leaf())
            .map(|t| t.id())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub(crate) fn backward<T: Float>(root: &Tensor<T>) -> Result<()> {
    if root.numel() != 1 {
        return Err(CvtError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            root.shape()
        )));
    }
    if !root.requires_grad() {
        return Err(CvtError::Contract(
            "backward on a tensor that does not require grad".into(),
        ));
    }
    if root.is_leaf() {
        root.accumulate_grad(&[T::ONE]);
        return Ok(());
    }

    let tape = GradTape::trace(root);
    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(root.id(), vec![T::ONE]);

    for node in tape.nodes.iter().rev() {
        if node.is_leaf() {
            continue;
        }
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        let mut add = |t: &Tensor<T>, contribution: Vec<T>| {
            if !t.requires_grad() {
                return;
            }
            if t.is_leaf() {
                t.accumulate_grad(&contribution);
                return;
            }
            match grads.entry(t.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (gi, ci) in e.get_mut().iter_mut().zip(&contribution) {
                        *gi += *ci;
                    }
                }
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(contribution);
                }
            }
        };
        propagate(node, &g, &mut add);
    }
    Ok(())
}

/// Apply one op's backward rule, emitting per-input gradient contributions.
fn propagate<T: Float>(node: &Tensor<T>, g: &[T], add: &mut dyn FnMut(&Tensor<T>, Vec<T>)) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.requires_grad() {
                add(a, g.to_vec());
            }
            if b.requires_grad() {
                add(b, g.to_vec());
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let da: Vec<T> = g.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).collect();
                add(a, da);
            }
            if b.requires_grad() {
                let db: Vec<T> = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect();
                add(b, db);
            }
        }
        Op::Scale(x, c) => {
            if x.requires_grad() {
                add(x, g.iter().map(|&gi| gi * *c).collect());
            }
        }
        Op::AddBias { x, bias } => {
            if x.requires_grad() {
                add(x, g.to_vec());
            }
            if bias.requires_grad() {
                let c = bias.numel();
                let mut db = vec![T::ZERO; c];
                for row in g.chunks(c) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                add(bias, db);
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let mut da = vec![T::ZERO; m * k];
                gemm_nt(m, n, k, g, b.data(), &mut da);
                add(a, da);
            }
            if b.requires_grad() {
                let mut db = vec![T::ZERO; k * n];
                gemm_tn(k, m, n, a.data(), g, &mut db);
                add(b, db);
            }
        }
        Op::Bmm { a, b } => {
            let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if a.requires_grad() {
                let mut da = vec![T::ZERO; nb * m * k];
                for i in 0..nb {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                add(a, da);
            }
            if b.requires_grad() {
                let mut db = vec![T::ZERO; nb * k * n];
                for i in 0..nb {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                add(b, db);
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            if x.requires_grad() {
                add(x, conv2d_backward_x(g, w.data(), geom));
            }
            if w.requires_grad() {
                add(w, conv2d_backward_w(g, x.data(), geom));
            }
            if let Some(bias) = bias {
                if bias.requires_grad() {
                    add(bias, conv2d_backward_bias(g, geom));
                }
            }
        }
        Op::Softmax { x, axis, y } => {
            if x.requires_grad() {
                let shape = node.shape();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                add(x, dx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let c = gamma.numel();
            let rows = x.numel() / c;
            let xd = x.data();
            let gd = gamma.data();
            if x.requires_grad() {
                let mut dx = vec![T::ZERO; x.numel()];
                for r in 0..rows {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let xr = &xd[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..c {
                        let xhat = (xr[j] - mu) * istd;
                        let dxhat = gr[j] * gd[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    let cn = T::from_usize(c);
                    m1 /= cn;
                    m2 /= cn;
                    let drow = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        let xhat = (xr[j] - mu) * istd;
                        drow[j] = istd * (gr[j] * gd[j] - m1 - xhat * m2);
                    }
                }
                add(x, dx);
            }
            if gamma.requires_grad() || beta.requires_grad() {
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for r in 0..rows {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let xr = &xd[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    for j in 0..c {
                        dgamma[j] += gr[j] * (xr[j] - mu) * istd;
                        dbeta[j] += gr[j];
                    }
                }
                if gamma.requires_grad() {
                    add(gamma, dgamma);
                }
                if beta.requires_grad() {
                    add(beta, dbeta);
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        } => {
            let shape = x.shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let n = b * plane;
            let xd = x.data();
            let gd = gamma.data();
            let per_channel = |ch: usize, f: &mut dyn FnMut(usize)| {
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for p in 0..plane {
                        f(base + p);
                    }
                }
            };
            if gamma.requires_grad() || beta.requires_grad() {
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for ch in 0..c {
                    let (mu, istd) = (mean[ch], inv_std[ch]);
                    per_channel(ch, &mut |idx| {
                        dgamma[ch] += g[idx] * (xd[idx] - mu) * istd;
                        dbeta[ch] += g[idx];
                    });
                }
                if gamma.requires_grad() {
                    add(gamma, dgamma);
                }
                if beta.requires_grad() {
                    add(beta, dbeta);
                }
            }
            if x.requires_grad() {
                let mut dx = vec![T::ZERO; x.numel()];
                for ch in 0..c {
                    let (mu, istd, gch) = (mean[ch], inv_std[ch], gd[ch]);
                    if *batch_stats {
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        per_channel(ch, &mut |idx| {
                            let xhat = (xd[idx] - mu) * istd;
                            let dxhat = g[idx] * gch;
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        });
                        let nn = T::from_usize(n);
                        m1 /= nn;
                        m2 /= nn;
                        per_channel(ch, &mut |idx| {
                            let xhat = (xd[idx] - mu) * istd;
                            dx[idx] = istd * (g[idx] * gch - m1 - xhat * m2);
                        });
                    } else {
                        per_channel(ch, &mut |idx| {
                            dx[idx] = g[idx] * gch * istd;
                        });
                    }
                }
                add(x, dx);
            }
        }
        Op::Gelu(x) => {
            if x.requires_grad() {
                let dx: Vec<T> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| gi * gelu_derivative(xi))
                    .collect();
                add(x, dx);
            }
        }
        Op::Reshape(x) => {
            if x.requires_grad() {
                add(x, g.to_vec());
            }
        }
        Op::Transpose { x, d0, d1 } => {
            if x.requires_grad() {
                let (dx, _) = transpose_two(g, node.shape(), *d0, *d1);
                add(x, dx);
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.shape();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let total_axis = out_shape[*axis];
            let mut offset = 0usize;
            for part in parts {
                let part_axis = part.shape()[*axis];
                if part.requires_grad() {
                    let mut dp = vec![T::ZERO; part.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * part_axis * inner;
                        dp[dst..dst + part_axis * inner]
                            .copy_from_slice(&g[src..src + part_axis * inner]);
                    }
                    add(part, dp);
                }
                offset += part_axis;
            }
        }
        Op::Narrow {
            x,
            axis,
            start,
            len,
        } => {
            if x.requires_grad() {
                let in_shape = x.shape();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let full_axis = in_shape[*axis];
                let mut dx = vec![T::ZERO; x.numel()];
                for o in 0..outer {
                    let dst = (o * full_axis + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add(x, dx);
            }
        }
        Op::RepeatBatch { x, n } => {
            if x.requires_grad() {
                let chunk = x.numel();
                let mut dx = vec![T::ZERO; chunk];
                for r in 0..*n {
                    for (d, &gi) in dx.iter_mut().zip(&g[r * chunk..(r + 1) * chunk]) {
                        *d += gi;
                    }
                }
                add(x, dx);
            }
        }
        Op::SumAll(x) => {
            if x.requires_grad() {
                add(x, vec![g[0]; x.numel()]);
            }
        }
        Op::MeanAll(x) => {
            if x.requires_grad() {
                let scale = g[0] / T::from_usize(x.numel());
                add(x, vec![scale; x.numel()]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if logits.requires_grad() {
                let bsz = logits.shape()[0];
                let k = logits.shape()[1];
                let inv_b = T::ONE / T::from_usize(bsz);
                let mut dl = vec![T::ZERO; logits.numel()];
                for (bi, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::ONE } else { T::ZERO };
                        dl[bi * k + j] = g[0] * (probs[bi * k + j] - onehot) * inv_b;
                    }
                }
                add(logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::GradTape;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![3.0f64, -1.0, 7.0, 0.5], &[2, 2]).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::param(vec![1.0f64, 2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn untracked_graph_records_nothing() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap();
        let y = x.scale(2.0).unwrap().sum_all().unwrap();
        assert!(y.is_leaf());
        let tape = GradTape::trace(&y);
        assert!(tape.entries().is_empty());
    }

    #[test]
    fn tape_is_topologically_ordered_and_replayed_in_reverse() {
        let x = Tensor::param(vec![0.5f64, -0.25, 1.5], &[3]).unwrap();
        let y = x.mul(&x).unwrap();
        let z = y.add(&x).unwrap();
        let loss = z.sum_all().unwrap();
        let tape = GradTape::trace(&loss);
        let entries = tape.entries();
        assert_eq!(entries.len(), 3);
        // Recording order is ascending output id, and every input was
        // produced earlier (or is a leaf with a smaller id).
        for pair in entries.windows(2) {
            assert!(pair[0].output_id < pair[1].output_id);
        }
        for e in &entries {
            for &input in &e.input_ids {
                assert!(input < e.output_id);
            }
        }
        let replay = tape.replay_order();
        let mut recorded: Vec<u64> = entries.iter().map(|e| e.output_id).collect();
        recorded.reverse();
        assert_eq!(replay, recorded);
    }

    #[test]
    fn grad_flows_through_shared_subexpression() {
        // loss = sum(x·x + x) → d/dx = 2x + 1
        let x = Tensor::param(vec![1.0f64, -2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -3.0]);
    }
}
