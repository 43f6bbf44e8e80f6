//! Central finite-difference gradient oracle.
//!
//! Used by the test suites to check autograd against an independent route:
//! the forward function is re-evaluated at perturbed inputs, never replayed
//! through the tape.

use crate::float::Float;
use crate::tensor::Tensor;

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error with a small absolute floor to keep near-zero gradients
/// from exploding the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` w.r.t. `input[coord]`.
///
/// `f` must be a pure function of the input tensors it receives.
pub fn finite_diff<T, F>(f: &F, inputs: &[Tensor<T>], which: usize, coord: usize, eps: f64) -> f64
where
    T: Float,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    let eval = |delta: f64| -> f64 {
        let perturbed: Vec<Tensor<T>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut data = t.data().to_vec();
                    data[coord] += T::from_f64(delta);
                    Tensor::from_vec(data, t.shape()).unwrap()
                } else {
                    Tensor::from_vec(t.data().to_vec(), t.shape()).unwrap()
                }
            })
            .collect();
        f(&perturbed).item().to_f64()
    };
    (eval(eps) - eval(-eps)) / (2.0 * eps)
}

/// Check autograd gradients of a scalar-valued `f` against central finite
/// differences on every coordinate of every input. Panics with a diagnostic
/// on the first coordinate whose relative error exceeds `tol`.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, tol: f64)
where
    T: Float,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    let params: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape()).unwrap())
        .collect();
    let loss = f(&params);
    loss.backward().expect("backward failed");
    for (which, p) in params.iter().enumerate() {
        let grad = p
            .grad()
            .unwrap_or_else(|| panic!("input {which} received no gradient"));
        for (coord, g) in grad.iter().enumerate() {
            let numeric = finite_diff(&f, inputs, which, coord, eps);
            let analytic = g.to_f64();
            let err = rel_err(analytic, numeric);
            assert!(
                err < tol,
                "input {which} coord {coord}: autograd {analytic:.6e} vs finite-diff {numeric:.6e} (rel err {err:.3e} >= {tol:.1e})"
            );
        }
    }
}
