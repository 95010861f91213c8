//! Central finite-difference verification of autodiff gradients.

use std::cell::Cell;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static RELU_MARGIN: Cell<Option<f64>> = const { Cell::new(None) };
}

/// Runs `f` and reports the smallest `|x|` fed to any ReLU meanwhile.
///
/// Central differences are only meaningful when no ReLU input sits within
/// the step of its kink; callers use this to pick a valid evaluation point.
pub fn relu_margin<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let previous = RELU_MARGIN.with(|m| m.replace(Some(f64::INFINITY)));
    let out = f();
    let margin = RELU_MARGIN.with(|m| m.replace(previous)).unwrap_or(f64::INFINITY);
    (out, margin)
}

pub(crate) fn observe_relu_inputs(x: &[f64]) {
    RELU_MARGIN.with(|m| {
        if let Some(current) = m.get() {
            m.set(Some(x.iter().fold(current, |acc, v| acc.min(v.abs()))));
        }
    });
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(f: F, x: &[f64], shape: &[usize], epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let plus = f(&Tensor::new(shape, probe.clone())?)?.item();
        probe[i] = x[i] - epsilon;
        let minus = f(&Tensor::new(shape, probe.clone())?)?.item();
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Compares the autodiff gradient of scalar `f` at `x` with central
/// differences and returns the largest per-coordinate relative error.
pub fn check_gradients<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let leaf = x.to_param();
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let numeric = numeric_gradient(&f, &x.to_vec(), x.shape(), epsilon)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}

/// Same comparison for a closure over existing parameter tensors, perturbing
/// each parameter in place. Gradients on `params` are reset before and after.
pub fn check_gradients_wrt<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    super::zero_grads(params);
    f()?.backward()?;
    let mut worst: f64 = 0.0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = p.data()[i];
            p.update(|d| d[i] = orig + epsilon);
            let plus = f()?.item();
            p.update(|d| d[i] = orig - epsilon);
            let minus = f()?.item();
            p.update(|d| d[i] = orig);
            worst = worst.max(relative_error(*a, (plus - minus) / (2.0 * epsilon)));
        }
    }
    super::zero_grads(params);
    Ok(worst)
}
