use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cross-entropy of one row of logits against a target distribution.
/// Returns the loss and writes `softmax(logits) - target` into `grad`.
pub(crate) fn xent_row(logits: &[f32], target: &[f32], grad: &mut [f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum_exp: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let mut loss = 0.0;
    for ((g, &z), &t) in grad.iter_mut().zip(logits).zip(target) {
        let log_p = z as f64 - log_z;
        if t != 0.0 {
            loss -= t as f64 * log_p;
        }
        *g = (log_p.exp() - t as f64) as f32;
    }
    loss
}

/// Softmax cross-entropy for a single example:
/// `loss = -log softmax(logits)[label]`, `grad = softmax(logits) - onehot(label)`.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    if logits.rank() != 1 {
        return Err(Error::shape(
            "softmax_xent",
            format!("expected a logit vector, got shape {:?}", logits.shape()),
        ));
    }
    let classes = logits.len();
    if label >= classes {
        return Err(Error::ClassOutOfRange {
            class: label,
            num_classes: classes,
        });
    }
    let mut target = vec![0.0; classes];
    target[label] = 1.0;
    let mut grad = vec![0.0; classes];
    let loss = xent_row(logits.data(), &target, &mut grad);
    Ok((loss as f32, Tensor::from_vec(grad)))
}
