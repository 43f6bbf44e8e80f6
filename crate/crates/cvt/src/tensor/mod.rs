//! Dense n-dimensional tensor with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation except for their gradient buffer.
//! Every op whose inputs are tracked records itself into the output's node,
//! forming the graph that [`GradTape`](autograd::GradTape) replays backward.

mod autograd;
mod conv;
mod gemm;
mod ops;

pub use autograd::{GradTape, TapeEntry};
pub use conv::ConvGeom;
pub(crate) use conv::conv_extent;
pub use gemm::num_threads;
pub use ops::cross_entropy;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{CvtError, Result};
use crate::float::Float;

use autograd::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct TensorInner<T: Float> {
    /// Monotonically increasing creation id; doubles as the recording order
    /// of the gradient tape.
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Op<T>,
    /// True when this tensor participates in gradient computation.
    tracked: bool,
    /// Accumulated gradient; populated by `backward` for tracked leaves.
    grad: Mutex<Option<Vec<T>>>,
}

/// Handle to an immutable tensor node; cloning is cheap (`Arc`).
pub struct Tensor<T: Float = f32> {
    inner: Arc<TensorInner<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Float> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, tracked={})",
            self.inner.id, self.inner.shape, self.inner.tracked
        )
    }
}

pub(crate) fn check_shape_len<T: Float>(data: &[T], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(CvtError::Contract(format!(
            "shape {:?} implies {} elements but {} were provided",
            shape,
            numel,
            data.len()
        )));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    /// Untracked leaf tensor from raw data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape_len(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Tracked leaf tensor (a trainable parameter): gradients accumulate here.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape_len(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![T::ZERO; numel], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![T::ONE; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![value; numel], shape.to_vec(), false)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, tracked: bool) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                op: Op::Leaf,
                tracked,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Output of a recorded operation. Tracking propagates from the inputs;
    /// untracked results drop the parent handles so no graph accumulates
    /// during frozen-model inference.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        #[cfg(debug_assertions)]
        {
            if !data.iter().all(|v| v.is_finite()) {
                return Err(CvtError::NonFinite { op: op.name() });
            }
        }
        let tracked = op.inputs().iter().any(|t| t.inner.tracked);
        let op = if tracked { op } else { Op::Leaf };
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                op,
                tracked,
                grad: Mutex::new(None),
            }),
        })
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.tracked
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        let mut cell = self.inner.grad.lock().unwrap();
        match cell.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *cell = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss: populates the grad
    /// buffers of every tracked leaf reachable from `self`, accumulating into
    /// whatever is already there.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }
}
