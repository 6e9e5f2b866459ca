//! Weight initialization.
//!
//! Weights are drawn from a uniform distribution whose limit depends on the
//! activation the layer feeds into: He for layers followed by ReLU
//! (`sqrt(6 / fan_in)`), Glorot for the layer feeding the softmax
//! (`sqrt(6 / (fan_in + fan_out))`). Biases start at zero. A single seeded
//! stream supplies every draw in layer order, so one seed fixes the entire
//! parameter set.

use rand::Rng;

use super::{layer_output_shape, FeatureShape, LayerParams, LayerSpec, NnError, ParamSet};
use crate::rng::{stream, TAG_INIT};
use crate::tensor::{Element, Tensor};

/// The activation a parameterized layer feeds into, found by scanning past
/// shape-only layers (pooling, flatten, dropout).
fn next_activation(layers: &[LayerSpec], after: usize) -> Option<&LayerSpec> {
    layers[after + 1..].iter().find(|l| {
        !matches!(
            l,
            LayerSpec::MaxPool { .. }
                | LayerSpec::AvgPool { .. }
                | LayerSpec::GlobalAvgPool
                | LayerSpec::Flatten
                | LayerSpec::Dropout { .. }
        )
    })
}

/// Fresh parameters for a layer stack applied to `input`-shaped features.
/// The same seed always yields bit-identical parameters.
pub fn init_params<T: Element>(
    layers: &[LayerSpec],
    input: FeatureShape,
    seed: u64,
) -> Result<ParamSet<T>, NnError> {
    let mut rng = stream(seed, TAG_INIT, 0, 0);
    let mut cur = input;
    let mut slots = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let slot = match *layer {
            LayerSpec::Conv2d { filters, kernel, .. } => {
                let FeatureShape::Spatial { c, .. } = cur else {
                    return Err(NnError::BadSequence {
                        layer: i,
                        what: "conv2d needs a spatial input, got a flat vector".into(),
                    });
                };
                let fan_in = kernel * kernel * c;
                let fan_out = kernel * kernel * filters;
                let limit = uniform_limit(layers, i, fan_in, fan_out);
                Some(LayerParams {
                    weights: draw_uniform(&mut rng, &[kernel, kernel, c, filters], limit)?,
                    bias: Tensor::from_dims(&[filters], vec![T::zero(); filters])?,
                })
            }
            LayerSpec::Dense { units } => {
                let FeatureShape::Flat { features } = cur else {
                    return Err(NnError::BadSequence {
                        layer: i,
                        what: "dense needs a flat input; add a flatten or global pooling layer first"
                            .into(),
                    });
                };
                let limit = uniform_limit(layers, i, features, units);
                Some(LayerParams {
                    weights: draw_uniform(&mut rng, &[features, units], limit)?,
                    bias: Tensor::from_dims(&[units], vec![T::zero(); units])?,
                })
            }
            _ => None,
        };
        slots.push(slot);
        cur = layer_output_shape(layer, i, cur)?;
    }
    Ok(ParamSet { layers: slots })
}

fn uniform_limit(layers: &[LayerSpec], index: usize, fan_in: usize, fan_out: usize) -> f64 {
    match next_activation(layers, index) {
        Some(LayerSpec::Softmax) => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        // ReLU, another weighted layer, or nothing: He keeps the forward
        // variance stable under rectification and is the safe default.
        _ => (6.0 / fan_in as f64).sqrt(),
    }
}

fn draw_uniform<T: Element>(
    rng: &mut rand_chacha::ChaCha8Rng,
    dims: &[usize],
    limit: f64,
) -> Result<Tensor<T>, NnError> {
    let count: usize = dims.iter().product();
    let data = (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            T::from_f64((2.0 * u - 1.0) * limit)
        })
        .collect();
    Ok(Tensor::from_dims(dims, data)?)
}
