//! Layer normalization and 2-D batch normalization layers.

use std::sync::Mutex;

use crate::error::Result;
use crate::float::Float;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

pub struct LayerNorm<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![T::ONE; dim], &[dim]).unwrap(),
            beta: Tensor::param(vec![T::ZERO; dim], &[dim]).unwrap(),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(&self.gamma, &self.beta, self.eps)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

struct Running<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// Batch normalization with running statistics.
///
/// Eval before any train-mode update normalizes with the initialized running
/// stats (mean 0, var 1) — documented behavior, not an error.
pub struct BatchNorm2d<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    running: Mutex<Running<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(dim: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![T::ONE; dim], &[dim]).unwrap(),
            beta: Tensor::param(vec![T::ZERO; dim], &[dim]).unwrap(),
            eps: BATCHNORM_EPS,
            momentum: BATCHNORM_MOMENTUM,
            running: Mutex::new(Running {
                mean: vec![T::ZERO; dim],
                var: vec![T::ONE; dim],
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let mut running = self.running.lock().unwrap();
        let Running { mean, var } = &mut *running;
        x.batchnorm2d(
            &self.gamma,
            &self.beta,
            mean,
            var,
            self.momentum,
            self.eps,
            training,
        )
    }

    pub fn running_stats(&self) -> (Vec<T>, Vec<T>) {
        let r = self.running.lock().unwrap();
        (r.mean.clone(), r.var.clone())
    }

    pub fn set_running_stats(&self, mean: Vec<T>, var: Vec<T>) {
        let mut r = self.running.lock().unwrap();
        assert_eq!(mean.len(), r.mean.len());
        assert_eq!(var.len(), r.var.len());
        r.mean = mean;
        r.var = var;
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    /// Running statistics, exposed by name for checkpointing.
    pub fn visit_buffers_mut(&self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        let mut r = self.running.lock().unwrap();
        f(format!("{prefix}.running_mean"), &mut r.mean);
        f(format!("{prefix}.running_var"), &mut r.var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_before_training_uses_initialized_stats() {
        let bn = BatchNorm2d::<f64>::new(2);
        let (m, v) = bn.running_stats();
        assert_eq!(m, vec![0.0, 0.0]);
        assert_eq!(v, vec![1.0, 1.0]);
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0], &[1, 2, 1, 2]).unwrap();
        let y = bn.forward(&x, false).unwrap();
        // (x - 0) / sqrt(1 + eps): identity within the eps effect
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn train_updates_running_stats_once() {
        let bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(vec![3.0, 7.0], &[1, 1, 1, 2]).unwrap();
        bn.forward(&x, true).unwrap();
        let (m, v) = bn.running_stats();
        // batch mean 5, population var 4; momentum 0.1 from (0, 1)
        assert!((m[0] - 0.5).abs() < 1e-12);
        assert!((v[0] - 1.3).abs() < 1e-12);
    }
}
