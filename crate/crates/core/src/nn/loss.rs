//! Cross-entropy loss over softmax probabilities.

use super::NnError;
use crate::tensor::{rank2, Element, Tensor};

/// Probabilities below this are clamped inside the logarithm so a confident
/// wrong prediction yields a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean loss over the batch plus the gradient with respect to the logits
/// that fed the softmax.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad_logits: Tensor<T>,
}

/// Mean categorical cross-entropy of softmax outputs `probs` against one-hot
/// `labels`, both `N x K`.
///
/// Because the probabilities come from a softmax, the gradient with respect
/// to the logits collapses to `(probs - labels) / N`; returning it here lets
/// the backward pass skip the softmax layer entirely.
pub fn cross_entropy_loss<T: Element>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<LossOutput<T>, NnError> {
    let [n, k] = rank2(probs.shape(), "cross-entropy")?;
    if probs.shape() != labels.shape() {
        return Err(NnError::BadLabels(format!(
            "labels shape {} does not match probabilities shape {}",
            labels.shape(),
            probs.shape()
        )));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for row in 0..n {
        let p = &probs.data()[row * k..(row + 1) * k];
        let y = &labels.data()[row * k..(row + 1) * k];
        let mut ones = 0usize;
        for (col, (&yi, &pi)) in y.iter().zip(p).enumerate() {
            if yi == T::one() {
                ones += 1;
                let clamped = if pi < floor { floor } else { pi };
                total -= clamped.ln();
            } else if yi != T::zero() {
                return Err(NnError::BadLabels(format!(
                    "row {row} has non-0/1 entry {yi}"
                )));
            }
            grad[row * k + col] = (pi - yi) * inv_n;
        }
        if ones != 1 {
            return Err(NnError::BadLabels(format!(
                "row {row} has {ones} entries set, expected exactly one"
            )));
        }
    }
    Ok(LossOutput {
        loss: total * inv_n,
        grad_logits: Tensor::from_dims(&[n, k], grad)?,
    })
}
