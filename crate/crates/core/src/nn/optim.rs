//! Parameter update rules: plain SGD and Adam.

use super::{GradientSet, NnError, ParamSet};
use crate::tensor::Element;

/// Update rule and its hyperparameters, kept in `f64` regardless of the
/// working precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerConfig {
    /// Adam with the conventional defaults used throughout this crate.
    pub fn adam_defaults() -> Self {
        OptimizerConfig::Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Mutable optimizer state. SGD keeps only the step counter; Adam also keeps
/// first/second moment estimates shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    step: u64,
    moments: Option<(ParamSet<T>, ParamSet<T>)>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: &OptimizerConfig, params: &ParamSet<T>) -> Self {
        let moments = match config {
            OptimizerConfig::Sgd { .. } => None,
            OptimizerConfig::Adam { .. } => Some((params.zeros_like(), params.zeros_like())),
        };
        OptimizerState { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one update. Layers whose gradient slot is `None` (frozen or below
/// the lowest trainable layer) are left untouched, moments included.
///
/// Every gradient is checked for NaN/infinity first; a non-finite value
/// aborts the step and names the offending layer and tensor.
pub fn optimizer_step<T: Element>(
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    params: &mut ParamSet<T>,
    grads: &GradientSet<T>,
) -> Result<(), NnError> {
    for (layer, slot) in grads.layers.iter().enumerate() {
        if let Some(g) = slot {
            if !g.weights.is_all_finite() {
                return Err(NnError::NonFiniteGradient {
                    layer,
                    tensor: "weights",
                });
            }
            if !g.bias.is_all_finite() {
                return Err(NnError::NonFiniteGradient {
                    layer,
                    tensor: "bias",
                });
            }
        }
    }
    state.step += 1;
    match *config {
        OptimizerConfig::Sgd { learning_rate } => {
            let lr = T::from_f64(learning_rate);
            for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
                let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) else {
                    continue;
                };
                sgd_tensor(p.weights.data_mut(), g.weights.data(), lr);
                sgd_tensor(p.bias.data_mut(), g.bias.data(), lr);
            }
        }
        OptimizerConfig::Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } => {
            let (m, v) = state
                .moments
                .as_mut()
                .expect("Adam state is created with moments");
            let b1 = T::from_f64(beta1);
            let b2 = T::from_f64(beta2);
            let eps = T::from_f64(epsilon);
            // Bias-corrected step size folds the corrections into the
            // learning rate: lr * sqrt(1 - b2^t) / (1 - b1^t).
            let t = state.step as i32;
            let corr = learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
            let lr_t = T::from_f64(corr);
            for ((p, g), (m, v)) in params
                .layers
                .iter_mut()
                .zip(&grads.layers)
                .zip(m.layers.iter_mut().zip(v.layers.iter_mut()))
            {
                let (Some(p), Some(g), Some(m), Some(v)) =
                    (p.as_mut(), g.as_ref(), m.as_mut(), v.as_mut())
                else {
                    continue;
                };
                adam_tensor(p.weights.data_mut(), g.weights.data(), m.weights.data_mut(), v.weights.data_mut(), b1, b2, eps, lr_t);
                adam_tensor(p.bias.data_mut(), g.bias.data(), m.bias.data_mut(), v.bias.data_mut(), b1, b2, eps, lr_t);
            }
        }
    }
    Ok(())
}

fn sgd_tensor<T: Element>(p: &mut [T], g: &[T], lr: T) {
    for (pv, &gv) in p.iter_mut().zip(g) {
        *pv -= lr * gv;
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_tensor<T: Element>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], b1: T, b2: T, eps: T, lr_t: T) {
    let one = T::one();
    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mv = b1 * *mv + (one - b1) * gv;
        *vv = b2 * *vv + (one - b2) * gv * gv;
        *pv -= lr_t * *mv / (vv.sqrt() + eps);
    }
}
