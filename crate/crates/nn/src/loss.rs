//! Scalar losses with analytic gradients.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Mean absolute error. The gradient at exact zeros is taken as 0.
pub fn l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape != target.shape {
        return Err(Error::Shape(format!(
            "l1: prediction {:?} vs target {:?}",
            pred.shape, target.shape
        )));
    }
    let n = pred.numel() as f64;
    let mut grad = Tensor::zeros(pred.shape);
    let mut total = 0.0f64;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        total += d.abs() as f64;
        *g = d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / n as f32;
    }
    Ok((total / n, grad))
}

/// Mean binary cross-entropy on raw scores against a constant label,
/// in the overflow-safe form max(x,0) - x*y + ln(1 + exp(-|x|)).
pub fn bce_with_logits(logits: &Tensor, label: f32) -> (f64, Tensor) {
    let n = logits.numel() as f64;
    let mut grad = Tensor::zeros(logits.shape);
    let mut total = 0.0f64;
    for (g, &x) in grad.data.iter_mut().zip(&logits.data) {
        let loss = (x.max(0.0) - x * label) as f64 + ((-x.abs()) as f64).exp().ln_1p();
        total += loss;
        let sig = 1.0 / (1.0 + (-x).exp());
        *g = (sig - label) / n as f32;
    }
    (total / n, grad)
}

/// Squared L2 between coefficient rows, meaned over the batch.
pub fn beta_l2(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape != target.shape {
        return Err(Error::Shape(format!(
            "beta-l2: prediction {:?} vs target {:?}",
            pred.shape, target.shape
        )));
    }
    let batch = pred.n() as f64;
    let mut grad = Tensor::zeros(pred.shape);
    let mut total = 0.0f64;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        total += (d * d) as f64;
        *g = 2.0 * d / batch as f32;
    }
    Ok((total / batch, grad))
}
