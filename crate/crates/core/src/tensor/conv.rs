//! 2-D convolution (cross-correlation) and pooling over `N x H x W x C`
//! batches.
//!
//! Convolution lowers each image to a patch matrix (im2col) and multiplies it
//! by the flattened kernel, so one matmul produces all output positions for
//! all output channels. Kernels are stored `Kh x Kw x Cin x Cout`: flattened
//! row-major that is already the `[Kh*Kw*Cin, Cout]` matrix the product
//! needs, no copy required.

use super::{matmul_slices, rank4, Element, Tensor, TensorError};

/// Spatial padding policy. `Same` pads with zeros so the output extent is
/// `ceil(input / stride)`, splitting an odd pad with the extra row/column on
/// the bottom/right. `Valid` uses only full windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling result. For max pooling, `argmax[k]` is the flat index into the
/// input tensor's data of the element that produced output element `k`
/// (first occurrence wins on ties), which is exactly what the backward pass
/// needs. Average pooling leaves it `None`.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

/// Resolved geometry for one conv2d call: output extents and the top/left
/// zero padding actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Output extent and top/left pad for one axis. Valid-mode kernel bounds are
/// checked by the caller before this runs.
fn axis_out(extent: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((extent - k) / stride + 1, 0),
        Padding::Same => {
            let out = (extent + stride - 1) / stride;
            let needed = (out - 1) * stride + k;
            let pad_total = needed.saturating_sub(extent);
            (out, pad_total / 2)
        }
    }
}

pub(crate) fn conv_geometry(
    input: &super::Shape,
    kernel: &super::Shape,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom, TensorError> {
    let [n, h, w, cin] = rank4(input, "conv2d input")?;
    let [kh, kw, kcin, cout] = rank4(kernel, "conv2d kernel")?;
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d channels",
            left: input.clone(),
            right: kernel.clone(),
        });
    }
    if padding == Padding::Valid && (kh > h || kw > w) {
        return Err(TensorError::KernelTooLarge {
            kernel: (kh, kw),
            padded: (h, w),
        });
    }
    let (out_h, pad_top) = axis_out(h, kh, stride, padding);
    let (out_w, pad_left) = axis_out(w, kw, stride, padding);
    Ok(ConvGeom {
        n,
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        stride,
        out_h,
        out_w,
        pad_top,
        pad_left,
    })
}

/// Lower one image (`h x w x cin`, row-major slice) to its patch matrix:
/// `[out_h*out_w, kh*kw*cin]`, one row per output position, zero-filled where
/// the window hangs over the padding. `col` must be zeroed by the caller.
pub(crate) fn im2col<T: Element>(image: &[T], g: &ConvGeom, col: &mut [T]) {
    let patch = g.patch_len();
    debug_assert_eq!(image.len(), g.h * g.w * g.cin);
    debug_assert_eq!(col.len(), g.out_h * g.out_w * patch);
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let row = &mut col[(oh * g.out_w + ow) * patch..(oh * g.out_w + ow + 1) * patch];
            for kh in 0..g.kh {
                let ih = (oh * g.stride + kh) as isize - g.pad_top as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                for kw in 0..g.kw {
                    let iw = (ow * g.stride + kw) as isize - g.pad_left as isize;
                    if iw < 0 || iw >= g.w as isize {
                        continue;
                    }
                    let src = (ih as usize * g.w + iw as usize) * g.cin;
                    let dst = (kh * g.kw + kw) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&image[src..src + g.cin]);
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto an image gradient: the exact
/// adjoint of [`im2col`]. Positions that read from padding are dropped.
pub(crate) fn col2im<T: Element>(col: &[T], g: &ConvGeom, image_grad: &mut [T]) {
    let patch = g.patch_len();
    debug_assert_eq!(image_grad.len(), g.h * g.w * g.cin);
    debug_assert_eq!(col.len(), g.out_h * g.out_w * patch);
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let row = &col[(oh * g.out_w + ow) * patch..(oh * g.out_w + ow + 1) * patch];
            for kh in 0..g.kh {
                let ih = (oh * g.stride + kh) as isize - g.pad_top as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                for kw in 0..g.kw {
                    let iw = (ow * g.stride + kw) as isize - g.pad_left as isize;
                    if iw < 0 || iw >= g.w as isize {
                        continue;
                    }
                    let dst = (ih as usize * g.w + iw as usize) * g.cin;
                    let src = (kh * g.kw + kw) * g.cin;
                    for c in 0..g.cin {
                        image_grad[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Batched 2-D cross-correlation.
///
/// `input` is `N x H x W x Cin`, `kernel` is `Kh x Kw x Cin x Cout`; the
/// result is `N x out_h x out_w x Cout`. Bias, if any, is the caller's
/// concern. With `Padding::Valid` a kernel larger than the input is an error.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>, TensorError> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, padding)?;
    let patch = g.patch_len();
    let positions = g.out_h * g.out_w;
    let image_len = g.h * g.w * g.cin;
    let out_image_len = positions * g.cout;
    let mut out = vec![T::zero(); g.n * out_image_len];
    let mut col = vec![T::zero(); positions * patch];
    for i in 0..g.n {
        for v in col.iter_mut() {
            *v = T::zero();
        }
        im2col(&input.data()[i * image_len..(i + 1) * image_len], &g, &mut col);
        matmul_slices(
            &col,
            kernel.data(),
            positions,
            patch,
            g.cout,
            &mut out[i * out_image_len..(i + 1) * out_image_len],
        );
    }
    Tensor::from_dims(&[g.n, g.out_h, g.out_w, g.cout], out)
}

/// Square-window pooling over `N x H x W x C`, no padding: output extent is
/// `(extent - window) / stride + 1` per axis, trailing elements that do not
/// fill a window are dropped.
pub fn pool2d<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    kind: PoolKind,
) -> Result<Pooled<T>, TensorError> {
    let [n, h, w, c] = rank4(input.shape(), "pool2d")?;
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    if window == 0 || window > h || window > w {
        return Err(TensorError::WindowTooLarge {
            window,
            input: (h, w),
        });
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = vec![T::zero(); n * out_h * out_w * c];
    let mut argmax = match kind {
        PoolKind::Max => Some(vec![0usize; out.len()]),
        PoolKind::Avg => None,
    };
    let inv_area = T::one() / T::from_f64((window * window) as f64);
    let data = input.data();
    for i in 0..n {
        for oh in 0..out_h {
            for ow in 0..out_w {
                for ch in 0..c {
                    let dst = ((i * out_h + oh) * out_w + ow) * c + ch;
                    match kind {
                        PoolKind::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_at = 0usize;
                            for kh in 0..window {
                                for kw in 0..window {
                                    let src = ((i * h + oh * stride + kh) * w + ow * stride + kw) * c + ch;
                                    if data[src] > best {
                                        best = data[src];
                                        best_at = src;
                                    }
                                }
                            }
                            out[dst] = best;
                            argmax.as_mut().unwrap()[dst] = best_at;
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for kh in 0..window {
                                for kw in 0..window {
                                    let src = ((i * h + oh * stride + kh) * w + ow * stride + kw) * c + ch;
                                    acc += data[src];
                                }
                            }
                            out[dst] = acc * inv_area;
                        }
                    }
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_dims(&[n, out_h, out_w, c], out)?,
        argmax,
    })
}

/// Output extents for [`pool2d`] with the same window/stride rules.
pub(crate) fn pool_out_dims(h: usize, w: usize, window: usize, stride: usize) -> (usize, usize) {
    ((h - window) / stride + 1, (w - window) / stride + 1)
}
