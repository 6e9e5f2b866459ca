//! Shared test fixtures: naive reference implementations and a
//! finite-difference gradient harness.
//!
//! The oracles here are deliberately written as direct nested loops over the
//! mathematical definitions — no im2col, no shared helpers with the library —
//! so agreement with the optimized kernels is meaningful evidence.

#![allow(dead_code)] // each integration test binary uses a subset

use std::path::Path;

use ctnet_core::data::{
    save_image_png, scan_dataset, ImageSample, Label, LabeledDataset, SplitDataset,
};
use ctnet_core::nn::{
    backward_all, backward_from_logits, cross_entropy_loss, forward_train, LayerSpec, ParamSet,
};
use ctnet_core::rng::{stream, TAG_DROPOUT};
use ctnet_core::tensor::{Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A purely in-memory dataset: `n_covid` + `n_normal` samples with sorted,
/// distinct relative paths and no files behind them. Enough for exercising
/// split logic.
pub fn synthetic_dataset(n_covid: usize, n_normal: usize) -> LabeledDataset {
    let mut samples = Vec::with_capacity(n_covid + n_normal);
    for i in 0..n_covid {
        samples.push(ImageSample {
            rel_path: format!("covid/c{i:05}.png"),
            label: Label::Covid,
        });
    }
    for i in 0..n_normal {
        samples.push(ImageSample {
            rel_path: format!("normal/n{i:05}.png"),
            label: Label::Normal,
        });
    }
    LabeledDataset {
        root: "synthetic".into(),
        samples,
    }
}

/// Write a small separable two-class PNG dataset under `root` and return a
/// split that trains on all of it and validates on `val_per_class` images
/// per class. One class carries a bright central disc over noise, the other
/// is noise alone.
pub fn write_toy_dataset(
    root: &Path,
    per_class: usize,
    side: usize,
    val_per_class: usize,
    seed: u64,
) -> SplitDataset {
    std::fs::create_dir_all(root.join("covid")).unwrap();
    std::fs::create_dir_all(root.join("normal")).unwrap();
    let mut rng = test_rng(seed);
    for i in 0..per_class {
        for positive in [true, false] {
            let mut data = vec![0.0f32; side * side];
            for v in data.iter_mut() {
                *v = rng.gen_range(0.1..0.3);
            }
            if positive {
                let c = side as i32 / 2;
                let r2 = (side as i32 / 4).pow(2);
                for y in 0..side as i32 {
                    for x in 0..side as i32 {
                        if (y - c).pow(2) + (x - c).pow(2) <= r2 {
                            data[(y * side as i32 + x) as usize] = 0.9;
                        }
                    }
                }
            }
            let img = Tensor::from_dims(&[side, side, 1], data).unwrap();
            let class = if positive { "covid" } else { "normal" };
            save_image_png(&root.join(class).join(format!("img_{i:02}.png")), &img).unwrap();
        }
    }
    let dataset = scan_dataset(root).unwrap().dataset;
    let mut val: Vec<ImageSample> = Vec::new();
    for label in [Label::Covid, Label::Normal] {
        val.extend(
            dataset
                .samples
                .iter()
                .filter(|s| s.label == label)
                .take(val_per_class)
                .cloned(),
        );
    }
    val.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    SplitDataset {
        root: root.to_path_buf(),
        train: dataset.samples.clone(),
        val,
        test: Vec::new(),
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_dims(dims, data).unwrap()
}

/// Textbook triple loop, accumulation order independent of the library's.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct sliding-window cross-correlation: explicitly build the zero-padded
/// image, then sum products. Padding per axis follows the contract: same
/// padding makes the output `ceil(extent / stride)` with any odd pixel going
/// to the bottom/right.
pub fn naive_conv2d(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let &[n, h, w, cin] = input.shape().dims() else { panic!("input rank") };
    let &[kh, kw, kcin, cout] = kernel.shape().dims() else { panic!("kernel rank") };
    assert_eq!(cin, kcin);
    let (out_h, pad_top) = naive_axis(h, kh, stride, padding);
    let (out_w, pad_left) = naive_axis(w, kw, stride, padding);

    // Zero-padded copy, generously sized so every window read is in bounds.
    let ph = h + pad_top + kh + stride;
    let pw = w + pad_left + kw + stride;
    let mut padded = vec![0.0; n * ph * pw * cin];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for c in 0..cin {
                    padded[((i * ph + y + pad_top) * pw + (x + pad_left)) * cin + c] =
                        input.get(&[i, y, x, c]);
                }
            }
        }
    }

    let mut out = vec![0.0; n * out_h * out_w * cout];
    for i in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for c in 0..cin {
                                let y = oy * stride + ky;
                                let x = ox * stride + kx;
                                acc += padded[((i * ph + y) * pw + x) * cin + c]
                                    * kernel.get(&[ky, kx, c, co]);
                            }
                        }
                    }
                    out[((i * out_h + oy) * out_w + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::from_dims(&[n, out_h, out_w, cout], out).unwrap()
}

fn naive_axis(extent: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((extent - k) / stride + 1, 0),
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let needed = (out - 1) * stride + k;
            let total = needed.saturating_sub(extent);
            (out, total / 2)
        }
    }
}

/// Direct window scan for max/average pooling, no padding.
pub fn naive_pool2d(input: &Tensor<f64>, window: usize, stride: usize, max: bool) -> Tensor<f64> {
    let &[n, h, w, c] = input.shape().dims() else { panic!("input rank") };
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = vec![0.0; n * out_h * out_w * c];
    for i in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ch in 0..c {
                    let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = input.get(&[i, oy * stride + ky, ox * stride + kx, ch]);
                            if max {
                                acc = acc.max(v);
                            } else {
                                acc += v;
                            }
                        }
                    }
                    out[((i * out_h + oy) * out_w + ox) * c + ch] =
                        if max { acc } else { acc / (window * window) as f64 };
                }
            }
        }
    }
    Tensor::from_dims(&[n, out_h, out_w, c], out).unwrap()
}

/// Random one-hot labels for an `n x 2` batch.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        if rng.gen::<bool>() {
            data.extend_from_slice(&[1.0, 0.0]);
        } else {
            data.extend_from_slice(&[0.0, 1.0]);
        }
    }
    Tensor::from_dims(&[n, 2], data).unwrap()
}

/// Result of one finite-difference sweep.
pub struct FdReport {
    pub checked: usize,
    /// Elements re-measured with the finer step (see `FD_H_FINE`).
    pub refined: usize,
    pub max_rel_err: f64,
}

const FD_H: f64 = 1e-5;
/// Fallback step. The network is piecewise smooth: relu and max-pooling
/// introduce kinks, and when one lies inside the `2 * FD_H` interval the
/// wide difference quotient measures a mix of two slopes rather than the
/// derivative. Shrinking the step isolates the active piece; an actually
/// wrong gradient keeps failing at any step size.
const FD_H_FINE: f64 = 1e-7;
const DROPOUT_SEED: u64 = 0xD0;

/// Cross-entropy loss of the stack in training mode, with the dropout stream
/// recreated identically on every call so the loss is a deterministic
/// function of parameters and input.
fn stack_loss(
    layers: &[LayerSpec],
    params: &ParamSet<f64>,
    input: &Tensor<f64>,
    labels: &Tensor<f64>,
) -> f64 {
    let mut rng = stream(DROPOUT_SEED, TAG_DROPOUT, 0, 0);
    let (probs, _) = forward_train(layers, params, input.clone(), &mut rng).unwrap();
    cross_entropy_loss(&probs, labels).unwrap().loss
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference measurement of one partial derivative, retried with
/// the finer step when the wide interval straddles a kink. Returns the
/// relative error against `analytic`; panics past tolerance.
fn fd_measure(
    analytic: f64,
    eval: &mut dyn FnMut(f64) -> f64,
    what: &dyn Fn() -> String,
    refined: &mut usize,
) -> f64 {
    let coarse = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
    let mut err = rel_err(analytic, coarse);
    if err > 1e-4 {
        let fine = (eval(FD_H_FINE) - eval(-FD_H_FINE)) / (2.0 * FD_H_FINE);
        err = rel_err(analytic, fine);
        *refined += 1;
        assert!(
            err <= 1e-4,
            "{}: analytic {analytic} vs numeric {coarse} (h={FD_H}) / {fine} (h={FD_H_FINE}), rel {err:.3e}",
            what()
        );
    }
    err
}

/// Check every analytic parameter and input gradient of a softmax-terminated
/// stack against central finite differences. Parameter gradients come from
/// the fused softmax/cross-entropy backward; input gradients from the
/// general per-layer backward — so both code paths face the same numbers.
pub fn fd_check_stack(
    layers: &[LayerSpec],
    params: &ParamSet<f64>,
    input: &Tensor<f64>,
    labels: &Tensor<f64>,
) -> FdReport {
    // Analytic gradients, fused path for parameters.
    let mut rng = stream(DROPOUT_SEED, TAG_DROPOUT, 0, 0);
    let (probs, caches) = forward_train(layers, params, input.clone(), &mut rng).unwrap();
    let loss = cross_entropy_loss(&probs, labels).unwrap();
    let param_grads =
        backward_from_logits(layers, params, caches, loss.grad_logits, 0).unwrap();

    // Analytic input gradient via the general backward, driving the softmax
    // layer's own rule with dL/dprobs = -y / (p * n).
    let mut rng = stream(DROPOUT_SEED, TAG_DROPOUT, 0, 0);
    let (probs2, caches2) = forward_train(layers, params, input.clone(), &mut rng).unwrap();
    let n_rows = labels.shape().dims()[0] as f64;
    let dldp: Vec<f64> = probs2
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| if y == 1.0 { -1.0 / (p * n_rows) } else { 0.0 })
        .collect();
    let dldp = Tensor::new(probs2.shape().clone(), dldp).unwrap();
    let (param_grads_general, input_grad) =
        backward_all(layers, params, caches2, dldp).unwrap();

    let mut checked = 0usize;
    let mut refined = 0usize;
    let mut max_rel = 0.0f64;

    // The two backward paths must agree with each other almost exactly.
    for (a, b) in param_grads.tensors().zip(param_grads_general.tensors()) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert!(
                (x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1.0),
                "fused and general backward disagree: {x} vs {y}"
            );
        }
    }

    // Finite differences over every parameter element.
    for (li, slot) in params.layers.iter().enumerate() {
        if slot.is_none() {
            continue;
        }
        let g = param_grads.layers[li].as_ref().expect("grad slot filled");
        for (tensor_name, grad_tensor) in [("weights", &g.weights), ("bias", &g.bias)] {
            let count = grad_tensor.shape().elem_count();
            for idx in 0..count {
                let analytic = grad_tensor.data()[idx];
                let mut eval = |delta: f64| {
                    let mut tweaked = params.clone();
                    let slot = tweaked.layers[li].as_mut().unwrap();
                    let t = if tensor_name == "weights" {
                        &mut slot.weights
                    } else {
                        &mut slot.bias
                    };
                    let mut data = t.data().to_vec();
                    data[idx] += delta;
                    *t = Tensor::new(t.shape().clone(), data).unwrap();
                    stack_loss(layers, &tweaked, input, labels)
                };
                let e = fd_measure(
                    analytic,
                    &mut eval,
                    &|| format!("layer {li} {tensor_name}[{idx}]"),
                    &mut refined,
                );
                max_rel = max_rel.max(e);
                checked += 1;
            }
        }
    }

    // Finite differences over every input element.
    for idx in 0..input.shape().elem_count() {
        let analytic = input_grad.data()[idx];
        let mut eval = |delta: f64| {
            let mut data = input.data().to_vec();
            data[idx] += delta;
            let tweaked = Tensor::new(input.shape().clone(), data).unwrap();
            stack_loss(layers, params, &tweaked, labels)
        };
        let e = fd_measure(analytic, &mut eval, &|| format!("input[{idx}]"), &mut refined);
        max_rel = max_rel.max(e);
        checked += 1;
    }

    FdReport {
        checked,
        refined,
        max_rel_err: max_rel,
    }
}
