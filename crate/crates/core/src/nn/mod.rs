//! Layers, parameters, and reverse-mode gradients.
//!
//! A network is a plain `Vec<LayerSpec>` plus a [`ParamSet`] holding one
//! optional weights/bias pair per layer. The forward pass moves each layer's
//! input into a [`LayerCache`]; the backward pass consumes those caches and
//! produces a gradient set with the same structure as the parameters, so the
//! optimizer can walk both in lockstep.

mod init;
mod loss;
mod optim;

pub use init::init_params;
pub use loss::{cross_entropy_loss, LossOutput};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::conv::{col2im, conv_geometry, im2col, pool_out_dims};
use crate::tensor::{
    conv2d, matmul_a_bt, matmul_at_b, pool2d, rank2, rank4, softmax, Element, Padding, PoolKind,
    Shape, Tensor, TensorError,
};

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    Tensor(TensorError),
    /// A layer cannot follow what comes before it (wrong feature shape).
    BadSequence { layer: usize, what: String },
    /// Dropout rate outside `[0, 1)`.
    BadDropoutRate { layer: usize, rate: f64 },
    /// Layer needs parameters but its slot is empty, or vice versa.
    ParamMismatch { layer: usize, what: &'static str },
    /// A gradient contains NaN or infinity; training cannot continue.
    NonFiniteGradient { layer: usize, tensor: &'static str },
    /// Labels passed to the loss are not one-hot rows.
    BadLabels(String),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Tensor(e) => write!(f, "{e}"),
            NnError::BadSequence { layer, what } => write!(f, "layer {layer}: {what}"),
            NnError::BadDropoutRate { layer, rate } => {
                write!(f, "layer {layer}: dropout rate {rate} outside [0, 1)")
            }
            NnError::ParamMismatch { layer, what } => write!(f, "layer {layer}: {what}"),
            NnError::NonFiniteGradient { layer, tensor } => {
                write!(f, "non-finite gradient in layer {layer} ({tensor})")
            }
            NnError::BadLabels(why) => write!(f, "bad labels: {why}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<TensorError> for NnError {
    fn from(e: TensorError) -> Self {
        NnError::Tensor(e)
    }
}

/// One layer of a feed-forward network. Weight shapes are implied by the
/// incoming feature shape: conv kernels are `K x K x Cin x filters`, dense
/// weights are `in_features x units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Relu,
    Flatten,
    Dense {
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

/// What flows between layers: a spatial `H x W x C` feature map or a flat
/// feature vector (batch dimension implied).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat { features: usize },
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureShape::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            FeatureShape::Flat { features } => write!(f, "{features}"),
        }
    }
}

/// Feature shape produced by `layer` (at position `index`, for error
/// messages) given its input feature shape.
pub fn layer_output_shape(
    layer: &LayerSpec,
    index: usize,
    input: FeatureShape,
) -> Result<FeatureShape, NnError> {
    let spatial = |what: &str| -> Result<(usize, usize, usize), NnError> {
        match input {
            FeatureShape::Spatial { h, w, c } => Ok((h, w, c)),
            FeatureShape::Flat { .. } => Err(NnError::BadSequence {
                layer: index,
                what: format!("{what} needs a spatial input, got a flat vector"),
            }),
        }
    };
    match *layer {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        } => {
            let (h, w, c) = spatial("conv2d")?;
            let g = conv_geometry(
                &Shape::new(&[1, h, w, c])?,
                &Shape::new(&[kernel, kernel, c, filters])?,
                stride,
                padding,
            )?;
            Ok(FeatureShape::Spatial {
                h: g.out_h,
                w: g.out_w,
                c: filters,
            })
        }
        LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
            let (h, w, c) = spatial("pooling")?;
            if stride == 0 {
                return Err(TensorError::ZeroStride.into());
            }
            if window == 0 || window > h || window > w {
                return Err(TensorError::WindowTooLarge {
                    window,
                    input: (h, w),
                }
                .into());
            }
            let (oh, ow) = pool_out_dims(h, w, window, stride);
            Ok(FeatureShape::Spatial { h: oh, w: ow, c })
        }
        LayerSpec::GlobalAvgPool => {
            let (_, _, c) = spatial("global average pooling")?;
            Ok(FeatureShape::Flat { features: c })
        }
        LayerSpec::Relu => Ok(input),
        LayerSpec::Flatten => match input {
            FeatureShape::Spatial { h, w, c } => Ok(FeatureShape::Flat { features: h * w * c }),
            flat @ FeatureShape::Flat { .. } => Ok(flat),
        },
        LayerSpec::Dense { units } => match input {
            FeatureShape::Flat { .. } => Ok(FeatureShape::Flat { features: units }),
            FeatureShape::Spatial { .. } => Err(NnError::BadSequence {
                layer: index,
                what: "dense needs a flat input; add a flatten or global pooling layer first".into(),
            }),
        },
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(NnError::BadDropoutRate { layer: index, rate });
            }
            Ok(input)
        }
        LayerSpec::Softmax => match input {
            FeatureShape::Flat { .. } => Ok(input),
            FeatureShape::Spatial { .. } => Err(NnError::BadSequence {
                layer: index,
                what: "softmax needs a flat input".into(),
            }),
        },
    }
}

/// Feature shape after running the whole stack, validating every transition.
pub fn shape_after(layers: &[LayerSpec], input: FeatureShape) -> Result<FeatureShape, NnError> {
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        cur = layer_output_shape(layer, i, cur)?;
    }
    Ok(cur)
}

/// Weights and bias for one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer parameter storage: one slot per layer, `None` for layers without
/// parameters. Gradients reuse the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

pub type GradientSet<T> = ParamSet<T>;

impl<T: Element> ParamSet<T> {
    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|slot| {
                    slot.as_ref().map(|p| LayerParams {
                        weights: Tensor::zeros(p.weights.shape().clone()),
                        bias: Tensor::zeros(p.bias.shape().clone()),
                    })
                })
                .collect(),
        }
    }

    /// Total scalar parameter count across all layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weights.shape().elem_count() + p.bias.shape().elem_count())
            .sum()
    }

    /// Tensors in serialization order: layer by layer, weights then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weights, &p.bias])
    }
}

/// Saved forward state for one layer, consumed by the backward pass. Layers
/// move their input here instead of cloning it.
#[derive(Debug)]
pub enum LayerCache<T> {
    Conv { input: Tensor<T> },
    MaxPool { input_shape: Shape, argmax: Vec<usize> },
    AvgPool { input_shape: Shape },
    GlobalAvgPool { input_shape: Shape },
    Relu { input: Tensor<T> },
    Flatten { input_shape: Shape },
    Dense { input: Tensor<T> },
    /// Scale is 0 or 1/(1-rate) per element; `None` means the layer was a
    /// no-op (rate 0).
    Dropout { scale: Option<Vec<T>> },
    Softmax { output: Tensor<T> },
}

fn params_of<'p, T>(
    layer: &LayerSpec,
    index: usize,
    params: &'p ParamSet<T>,
) -> Result<Option<&'p LayerParams<T>>, NnError> {
    let slot = params.layers.get(index).ok_or(NnError::ParamMismatch {
        layer: index,
        what: "parameter set shorter than layer stack",
    })?;
    match (layer.has_params(), slot) {
        (true, Some(p)) => Ok(Some(p)),
        (false, None) => Ok(None),
        (true, None) => Err(NnError::ParamMismatch {
            layer: index,
            what: "layer needs weights but the parameter slot is empty",
        }),
        (false, Some(_)) => Err(NnError::ParamMismatch {
            layer: index,
            what: "layer takes no weights but the parameter slot is filled",
        }),
    }
}

/// Add a bias vector to every row/pixel of `data`, where the trailing
/// dimension has extent `bias.len()`.
fn add_bias<T: Element>(data: &mut [T], bias: &[T]) {
    for chunk in data.chunks_exact_mut(bias.len()) {
        for (v, &b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Run one layer forward. The input tensor is moved into the returned cache
/// when the backward pass will need it.
pub fn layer_forward<T: Element>(
    layer: &LayerSpec,
    index: usize,
    params: Option<&LayerParams<T>>,
    input: Tensor<T>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<T>, LayerCache<T>), NnError> {
    match *layer {
        LayerSpec::Conv2d { stride, padding, .. } => {
            let p = params.ok_or(NnError::ParamMismatch {
                layer: index,
                what: "conv2d has no parameters",
            })?;
            let mut out = conv2d(&input, &p.weights, stride, padding)?;
            add_bias(out.data_mut(), p.bias.data());
            Ok((out, LayerCache::Conv { input }))
        }
        LayerSpec::MaxPool { window, stride } => {
            let pooled = pool2d(&input, window, stride, PoolKind::Max)?;
            Ok((
                pooled.output,
                LayerCache::MaxPool {
                    input_shape: input.shape().clone(),
                    argmax: pooled.argmax.expect("max pool always produces argmax"),
                },
            ))
        }
        LayerSpec::AvgPool { window, stride } => {
            let pooled = pool2d(&input, window, stride, PoolKind::Avg)?;
            Ok((
                pooled.output,
                LayerCache::AvgPool {
                    input_shape: input.shape().clone(),
                },
            ))
        }
        LayerSpec::GlobalAvgPool => {
            let [n, h, w, c] = rank4(input.shape(), "global average pooling")?;
            let inv = T::one() / T::from_f64((h * w) as f64);
            let mut out = vec![T::zero(); n * c];
            for i in 0..n {
                let image = &input.data()[i * h * w * c..(i + 1) * h * w * c];
                let dst = &mut out[i * c..(i + 1) * c];
                for px in image.chunks_exact(c) {
                    for (d, &v) in dst.iter_mut().zip(px) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
            Ok((
                Tensor::from_dims(&[n, c], out)?,
                LayerCache::GlobalAvgPool {
                    input_shape: input.shape().clone(),
                },
            ))
        }
        LayerSpec::Relu => {
            let out = input.max_scalar(T::zero());
            Ok((out, LayerCache::Relu { input }))
        }
        LayerSpec::Flatten => {
            let shape = input.shape().clone();
            let out = match *shape.dims() {
                [n, h, w, c] => input.reshape(&[n, h * w * c])?,
                [_, _] => input,
                _ => {
                    return Err(NnError::BadSequence {
                        layer: index,
                        what: format!("flatten expects rank 4 or 2, got shape {shape}"),
                    })
                }
            };
            Ok((out, LayerCache::Flatten { input_shape: shape }))
        }
        LayerSpec::Dense { .. } => {
            let p = params.ok_or(NnError::ParamMismatch {
                layer: index,
                what: "dense has no parameters",
            })?;
            let mut out = input.matmul(&p.weights)?;
            add_bias(out.data_mut(), p.bias.data());
            Ok((out, LayerCache::Dense { input }))
        }
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(NnError::BadDropoutRate { layer: index, rate });
            }
            match dropout_rng {
                Some(rng) if rate > 0.0 => {
                    let keep = T::from_f64(1.0 / (1.0 - rate));
                    let scale: Vec<T> = (0..input.shape().elem_count())
                        .map(|_| {
                            if rng.gen::<f64>() < rate {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let mut out = input;
                    for (v, &s) in out.data_mut().iter_mut().zip(&scale) {
                        *v *= s;
                    }
                    Ok((out, LayerCache::Dropout { scale: Some(scale) }))
                }
                // Inference, or a rate of zero: identity.
                _ => Ok((input, LayerCache::Dropout { scale: None })),
            }
        }
        LayerSpec::Softmax => {
            let out = softmax(&input)?;
            Ok((
                out.clone(),
                LayerCache::Softmax { output: out },
            ))
        }
    }
}

/// Forward pass for inference: dropout is the identity and no caches are
/// kept, so intermediate activations are freed as the pass advances.
pub fn forward<T: Element>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    input: Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        let p = params_of(layer, i, params)?;
        let (out, _) = layer_forward(layer, i, p, cur, None)?;
        cur = out;
    }
    Ok(cur)
}

/// Forward pass for training: dropout draws from `dropout_rng` in layer
/// order, and every layer's cache is retained for the backward pass.
pub fn forward_train<T: Element>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    input: Tensor<T>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>), NnError> {
    let mut cur = input;
    let mut caches = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let p = params_of(layer, i, params)?;
        let (out, cache) = layer_forward(layer, i, p, cur, Some(dropout_rng))?;
        caches.push(cache);
        cur = out;
    }
    Ok((cur, caches))
}

/// Backward through one layer: upstream gradient in, input gradient and
/// parameter gradients out.
pub fn layer_backward<T: Element>(
    layer: &LayerSpec,
    index: usize,
    params: Option<&LayerParams<T>>,
    cache: LayerCache<T>,
    grad_out: Tensor<T>,
) -> Result<(Tensor<T>, Option<LayerParams<T>>), NnError> {
    match (layer, cache) {
        (&LayerSpec::Conv2d { stride, padding, .. }, LayerCache::Conv { input }) => {
            let p = params.ok_or(NnError::ParamMismatch {
                layer: index,
                what: "conv2d has no parameters",
            })?;
            let g = conv_geometry(input.shape(), p.weights.shape(), stride, padding)?;
            let patch = g.patch_len();
            let positions = g.out_h * g.out_w;
            let image_len = g.h * g.w * g.cin;
            let out_image_len = positions * g.cout;

            let mut dw = vec![T::zero(); patch * g.cout];
            let mut db = vec![T::zero(); g.cout];
            let mut dx = vec![T::zero(); g.n * image_len];
            let mut col = vec![T::zero(); positions * patch];
            let mut dcol = vec![T::zero(); positions * patch];
            for i in 0..g.n {
                let dy = &grad_out.data()[i * out_image_len..(i + 1) * out_image_len];
                for v in col.iter_mut() {
                    *v = T::zero();
                }
                im2col(&input.data()[i * image_len..(i + 1) * image_len], &g, &mut col);
                // dW += col^T x dY, accumulated across the batch
                matmul_at_b(&col, dy, positions, patch, g.cout, &mut dw);
                // dX_col = dY x W^T, then scattered back onto the image
                for v in dcol.iter_mut() {
                    *v = T::zero();
                }
                matmul_a_bt(dy, p.weights.data(), positions, g.cout, patch, &mut dcol);
                col2im(&dcol, &g, &mut dx[i * image_len..(i + 1) * image_len]);
                for row in dy.chunks_exact(g.cout) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            Ok((
                Tensor::new(input.shape().clone(), dx)?,
                Some(LayerParams {
                    weights: Tensor::new(p.weights.shape().clone(), dw)?,
                    bias: Tensor::from_dims(&[g.cout], db)?,
                }),
            ))
        }
        (&LayerSpec::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
            let mut dx = vec![T::zero(); input_shape.elem_count()];
            for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                dx[src] += g;
            }
            Ok((Tensor::new(input_shape, dx)?, None))
        }
        (&LayerSpec::AvgPool { window, stride }, LayerCache::AvgPool { input_shape }) => {
            let [n, h, w, c] = rank4(&input_shape, "avg pool backward")?;
            let (out_h, out_w) = pool_out_dims(h, w, window, stride);
            let inv_area = T::one() / T::from_f64((window * window) as f64);
            let mut dx = vec![T::zero(); input_shape.elem_count()];
            let dy = grad_out.data();
            for i in 0..n {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        for ch in 0..c {
                            let g = dy[((i * out_h + oh) * out_w + ow) * c + ch] * inv_area;
                            for kh in 0..window {
                                for kw in 0..window {
                                    let dst =
                                        ((i * h + oh * stride + kh) * w + ow * stride + kw) * c + ch;
                                    dx[dst] += g;
                                }
                            }
                        }
                    }
                }
            }
            Ok((Tensor::new(input_shape, dx)?, None))
        }
        (&LayerSpec::GlobalAvgPool, LayerCache::GlobalAvgPool { input_shape }) => {
            let [n, h, w, c] = rank4(&input_shape, "global average pooling backward")?;
            let inv = T::one() / T::from_f64((h * w) as f64);
            let mut dx = vec![T::zero(); input_shape.elem_count()];
            for i in 0..n {
                let dy = &grad_out.data()[i * c..(i + 1) * c];
                for px in dx[i * h * w * c..(i + 1) * h * w * c].chunks_exact_mut(c) {
                    for (d, &g) in px.iter_mut().zip(dy) {
                        *d = g * inv;
                    }
                }
            }
            Ok((Tensor::new(input_shape, dx)?, None))
        }
        (&LayerSpec::Relu, LayerCache::Relu { input }) => {
            // Gradient passes where the pre-activation was strictly positive;
            // an input of exactly zero blocks it.
            let mut dx = grad_out;
            for (g, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                if x <= T::zero() {
                    *g = T::zero();
                }
            }
            Ok((dx, None))
        }
        (&LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => {
            Ok((grad_out.reshape(input_shape.dims())?, None))
        }
        (&LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
            let p = params.ok_or(NnError::ParamMismatch {
                layer: index,
                what: "dense has no parameters",
            })?;
            let [n, features] = rank2(input.shape(), "dense backward")?;
            let [_, units] = rank2(p.weights.shape(), "dense backward")?;
            let mut dx = vec![T::zero(); n * features];
            matmul_a_bt(grad_out.data(), p.weights.data(), n, units, features, &mut dx);
            let mut dw = vec![T::zero(); features * units];
            matmul_at_b(input.data(), grad_out.data(), n, features, units, &mut dw);
            let mut db = vec![T::zero(); units];
            for row in grad_out.data().chunks_exact(units) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Ok((
                Tensor::from_dims(&[n, features], dx)?,
                Some(LayerParams {
                    weights: Tensor::from_dims(&[features, units], dw)?,
                    bias: Tensor::from_dims(&[units], db)?,
                }),
            ))
        }
        (&LayerSpec::Dropout { .. }, LayerCache::Dropout { scale }) => {
            let mut dx = grad_out;
            if let Some(scale) = scale {
                for (g, &s) in dx.data_mut().iter_mut().zip(&scale) {
                    *g *= s;
                }
            }
            Ok((dx, None))
        }
        (&LayerSpec::Softmax, LayerCache::Softmax { output }) => {
            // dx_i = p_i * (u_i - sum_j u_j p_j), row by row
            let [n, k] = rank2(output.shape(), "softmax backward")?;
            let mut dx = vec![T::zero(); n * k];
            for row in 0..n {
                let p = &output.data()[row * k..(row + 1) * k];
                let u = &grad_out.data()[row * k..(row + 1) * k];
                let mut dot = T::zero();
                for (&pi, &ui) in p.iter().zip(u) {
                    dot += pi * ui;
                }
                for ((d, &pi), &ui) in dx[row * k..(row + 1) * k].iter_mut().zip(p).zip(u) {
                    *d = pi * (ui - dot);
                }
            }
            Ok((Tensor::from_dims(&[n, k], dx)?, None))
        }
        (layer, cache) => Err(NnError::BadSequence {
            layer: index,
            what: format!("cache {cache:?} does not belong to layer {layer:?}"),
        }),
    }
}

fn backward_range<T: Element>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    caches: Vec<LayerCache<T>>,
    grad: Tensor<T>,
    stop_layer: usize,
) -> Result<(GradientSet<T>, Tensor<T>), NnError> {
    debug_assert_eq!(layers.len(), caches.len());
    let mut grads: Vec<Option<LayerParams<T>>> = Vec::new();
    grads.resize_with(params.layers.len(), || None);
    let mut cur = grad;
    for (i, cache) in caches.into_iter().enumerate().rev() {
        if i < stop_layer {
            break;
        }
        let layer = &layers[i];
        let p = params_of(layer, i, params)?;
        let (grad_in, layer_grads) = layer_backward(layer, i, p, cache, cur)?;
        grads[i] = layer_grads;
        cur = grad_in;
    }
    Ok((ParamSet { layers: grads }, cur))
}

/// Full backward pass through every layer (softmax included). Returns the
/// parameter gradients and the gradient with respect to the network input.
pub fn backward_all<T: Element>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    caches: Vec<LayerCache<T>>,
    grad_output: Tensor<T>,
) -> Result<(GradientSet<T>, Tensor<T>), NnError> {
    backward_range(layers, params, caches, grad_output, 0)
}

/// Backward pass for training with the fused softmax/cross-entropy gradient:
/// `grad_logits` enters below the trailing softmax layer, whose own backward
/// is skipped. `first_trainable` stops propagation early when lower layers
/// are frozen; their gradient slots stay empty.
pub fn backward_from_logits<T: Element>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    mut caches: Vec<LayerCache<T>>,
    grad_logits: Tensor<T>,
    first_trainable: usize,
) -> Result<GradientSet<T>, NnError> {
    let mut upto = layers.len();
    if matches!(layers.last(), Some(LayerSpec::Softmax)) {
        upto -= 1;
        caches.truncate(upto);
    }
    let (grads, _) = backward_range(&layers[..upto], params, caches, grad_logits, first_trainable)?;
    let mut layers_grads = grads.layers;
    layers_grads.resize_with(params.layers.len(), || None);
    Ok(ParamSet { layers: layers_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, TAG_DROPOUT};

    fn dense_params(weights: Vec<f64>, w_dims: &[usize], bias: Vec<f64>) -> ParamSet<f64> {
        ParamSet {
            layers: vec![Some(LayerParams {
                weights: Tensor::from_dims(w_dims, weights).unwrap(),
                bias: Tensor::from_dims(&[bias.len()], bias).unwrap(),
            })],
        }
    }

    #[test]
    fn dense_forward_known_values() {
        let layers = [LayerSpec::Dense { units: 2 }];
        let params = dense_params(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], vec![10.0, 20.0]);
        let x = Tensor::from_dims(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = forward(&layers, &params, x).unwrap();
        assert_eq!(y.data(), &[14.0, 26.0]);
    }

    #[test]
    fn relu_blocks_gradient_at_exactly_zero() {
        let layer = LayerSpec::Relu;
        let x = Tensor::from_dims(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = layer_forward(&layer, 0, None, x, None).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_dims(&[1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let (dx, _) = layer_backward(&layer, 0, None, cache, g).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn shape_inference_walks_a_small_stack() {
        let layers = [
            LayerSpec::Conv2d {
                filters: 4,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        let out = shape_after(&layers, FeatureShape::Spatial { h: 8, w: 8, c: 1 }).unwrap();
        assert_eq!(out, FeatureShape::Flat { features: 2 });
    }

    #[test]
    fn dense_before_flatten_is_rejected() {
        let layers = [LayerSpec::Dense { units: 2 }];
        let err = shape_after(&layers, FeatureShape::Spatial { h: 4, w: 4, c: 1 }).unwrap_err();
        assert!(matches!(err, NnError::BadSequence { layer: 0, .. }));
    }

    #[test]
    fn dropout_rate_validation() {
        let layers = [LayerSpec::Dropout { rate: 1.0 }];
        assert!(matches!(
            shape_after(&layers, FeatureShape::Flat { features: 4 }).unwrap_err(),
            NnError::BadDropoutRate { rate, .. } if rate == 1.0
        ));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let layer = LayerSpec::Dropout { rate: 0.5 };
        let x = Tensor::from_dims(&[1, 64], vec![1.0f64; 64]).unwrap();

        let (y, _) = layer_forward(&layer, 0, None, x.clone(), None).unwrap();
        assert_eq!(y, x);

        let mut rng = stream(7, TAG_DROPOUT, 0, 0);
        let (y, cache) = layer_forward(&layer, 0, None, x, Some(&mut rng)).unwrap();
        let kept: Vec<f64> = y.data().iter().copied().filter(|&v| v != 0.0).collect();
        assert!(!kept.is_empty() && kept.len() < 64, "rate 0.5 on 64 values");
        assert!(kept.iter().all(|&v| v == 2.0), "kept values scaled by 1/(1-rate)");

        // Backward applies the identical mask.
        let g = Tensor::from_dims(&[1, 64], vec![1.0f64; 64]).unwrap();
        let (dx, _) = layer_backward(&layer, 0, None, cache, g).unwrap();
        for (a, b) in dx.data().iter().zip(y.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let layer = LayerSpec::GlobalAvgPool;
        let x = Tensor::from_dims(&[1, 2, 2, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0])
            .unwrap();
        let (y, cache) = layer_forward(&layer, 0, None, x, None).unwrap();
        assert_eq!(y.shape().dims(), &[1, 2]);
        assert_eq!(y.data(), &[2.5, 25.0]);
        let g = Tensor::from_dims(&[1, 2], vec![4.0, 8.0]).unwrap();
        let (dx, _) = layer_backward(&layer, 0, None, cache, g).unwrap();
        assert_eq!(dx.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn flatten_backward_restores_shape() {
        let layer = LayerSpec::Flatten;
        let x = Tensor::from_dims(&[2, 2, 2, 1], (0..8).map(|v| v as f64).collect()).unwrap();
        let (y, cache) = layer_forward(&layer, 0, None, x, None).unwrap();
        assert_eq!(y.shape().dims(), &[2, 4]);
        let (dx, _) = layer_backward(&layer, 0, None, cache, y).unwrap();
        assert_eq!(dx.shape().dims(), &[2, 2, 2, 1]);
    }

    #[test]
    fn param_slot_mismatches_are_caught() {
        let layers = [LayerSpec::Relu];
        let params = dense_params(vec![0.0], &[1, 1], vec![0.0]);
        let x = Tensor::from_dims(&[1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            forward(&layers, &params, x).unwrap_err(),
            NnError::ParamMismatch { .. }
        ));
    }
}
