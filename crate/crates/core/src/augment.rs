//! Training-time image augmentation.
//!
//! Geometric augmentation composes zoom, shear, shift, and an optional
//! horizontal flip into one affine map about the image centre, applied as a
//! single inverse warp with bilinear sampling and edge replication — so a
//! chain of transforms costs one resampling pass, and identity parameters
//! reproduce the input exactly. Photometric augmentation then jitters
//! brightness, contrast, and saturation, clamping to `[0, 1]` after each
//! stage. All randomness comes from a caller-provided stream; the draw order
//! is fixed, so one seed fully determines the result.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentError {
    pub field: &'static str,
    pub why: String,
}

impl fmt::Display for AugmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "augment config {}: {}", self.field, self.why)
    }
}

impl std::error::Error for AugmentError {}

/// Sampling ranges for each augmentation. Every range is `(lo, hi)` with
/// `lo <= hi`; a collapsed range pins that parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Scale factor about the centre; 1 is no zoom.
    pub zoom: (f64, f64),
    /// Probability of mirroring horizontally.
    pub hflip_prob: f64,
    /// Horizontal shear angle in radians; 0 is no shear.
    pub shear: (f64, f64),
    /// Translation as a fraction of width/height, drawn independently per
    /// axis; 0 is no shift.
    pub shift: (f64, f64),
    /// Additive brightness offset; 0 is unchanged.
    pub brightness: (f64, f64),
    /// Contrast factor about the image mean; 1 is unchanged.
    pub contrast: (f64, f64),
    /// Saturation factor about per-pixel luminance (RGB only); 1 is
    /// unchanged.
    pub saturation: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            zoom: (0.9, 1.1),
            hflip_prob: 0.5,
            shear: (-0.1, 0.1),
            shift: (-0.1, 0.1),
            brightness: (-0.1, 0.1),
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    /// Ranges collapsed so sampling always yields the identity.
    pub fn neutral() -> Self {
        AugmentConfig {
            zoom: (1.0, 1.0),
            hflip_prob: 0.0,
            shear: (0.0, 0.0),
            shift: (0.0, 0.0),
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ordered = |field: &'static str, (lo, hi): (f64, f64)| {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                Err(AugmentError {
                    field,
                    why: format!("({lo}, {hi}) is not an ordered finite range"),
                })
            } else {
                Ok(())
            }
        };
        ordered("zoom", self.zoom)?;
        ordered("shear", self.shear)?;
        ordered("shift", self.shift)?;
        ordered("brightness", self.brightness)?;
        ordered("contrast", self.contrast)?;
        ordered("saturation", self.saturation)?;
        if self.zoom.0 <= 0.0 {
            return Err(AugmentError {
                field: "zoom",
                why: format!("lower bound {} must be positive", self.zoom.0),
            });
        }
        if self.contrast.0 < 0.0 || self.saturation.0 < 0.0 {
            return Err(AugmentError {
                field: "contrast/saturation",
                why: "factors must be non-negative".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(AugmentError {
                field: "hflip_prob",
                why: format!("{} is not a probability", self.hflip_prob),
            });
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub zoom: f64,
    pub hflip: bool,
    pub shear: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            zoom: 1.0,
            hflip: false,
            shear: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.zoom == 1.0 && !self.hflip && self.shear == 0.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.gen();
    if lo == hi {
        // Collapsed range: still exact, and the draw above keeps the stream
        // position independent of the configured ranges.
        lo
    } else {
        lo + u * (hi - lo)
    }
}

/// Draw one parameter set. Exactly eight draws are consumed in a fixed order
/// (zoom, flip, shear, shift x, shift y, brightness, contrast, saturation)
/// regardless of the configured ranges, so narrowing one range never shifts
/// another parameter's values.
pub fn sample_params(config: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentParams {
    let zoom = uniform(rng, config.zoom);
    let hflip = rng.gen::<f64>() < config.hflip_prob;
    let shear = uniform(rng, config.shear);
    let shift_x = uniform(rng, config.shift);
    let shift_y = uniform(rng, config.shift);
    let brightness = uniform(rng, config.brightness);
    let contrast = uniform(rng, config.contrast);
    let saturation = uniform(rng, config.saturation);
    AugmentParams {
        zoom,
        hflip,
        shear,
        shift_x,
        shift_y,
        brightness,
        contrast,
        saturation,
    }
}

/// Bilinear sample of `image` (`h x w x c`) at fractional `(x, y)`, with
/// coordinates clamped to the image so out-of-frame reads replicate edges.
fn sample_bilinear(image: &[f32], h: usize, w: usize, c: usize, x: f64, y: f64, out: &mut [f32]) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let wx = (x - x0 as f64) as f32;
    let wy = (y - y0 as f64) as f32;
    for ch in 0..c {
        let at = |yy: usize, xx: usize| image[(yy * w + xx) * c + ch];
        let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
        let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
        out[ch] = top * (1.0 - wy) + bot * wy;
    }
}

/// Warp an `h x w x c` image by the geometric part of `params`.
///
/// The forward map applies, in order, zoom about the centre, horizontal
/// shear (`x' = x + tan(angle) * (y - cy)`), shift by
/// `(shift_x * w, shift_y * h)` pixels, and finally the horizontal flip
/// (`x' = (w-1) - x`). Each output pixel inverts that chain and samples the
/// input bilinearly.
pub fn apply_geometric(image: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    if params.is_geometric_identity() {
        return image.clone();
    }
    let [h, w, c] = match *image.shape().dims() {
        [h, w, c] => [h, w, c],
        _ => unreachable!("augmentation operates on h x w x c images"),
    };
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;
    let tan_shear = params.shear.tan();
    let dx = params.shift_x * w as f64;
    let dy = params.shift_y * h as f64;
    let src = image.data();
    let mut out = vec![0.0f32; h * w * c];
    let mut px = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            // Invert the forward chain: flip, then shift, shear, zoom.
            let mut fx = x as f64;
            let fy = y as f64;
            if params.hflip {
                fx = (w - 1) as f64 - fx;
            }
            fx -= dx;
            let mut fy2 = fy - dy;
            fx -= tan_shear * (fy2 - cy);
            fx = cx + (fx - cx) / params.zoom;
            fy2 = cy + (fy2 - cy) / params.zoom;
            sample_bilinear(src, h, w, c, fx, fy2, &mut px);
            out[(y * w + x) * c..(y * w + x) * c + c].copy_from_slice(&px);
        }
    }
    Tensor::new(image.shape().clone(), out).expect("same shape as input")
}

/// Apply brightness, contrast, and saturation in that order, clamping to
/// `[0, 1]` after each stage. Contrast scales about the global image mean;
/// saturation blends each RGB pixel with its luminance and is skipped for
/// single-channel images. Neutral factors leave values bit-identical.
pub fn apply_photometric(image: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    let [_, _, c] = match *image.shape().dims() {
        [h, w, c] => [h, w, c],
        _ => unreachable!("augmentation operates on h x w x c images"),
    };
    let mut out = image.clone();

    if params.brightness != 0.0 {
        let b = params.brightness as f32;
        for v in out.data_mut() {
            *v = (*v + b).clamp(0.0, 1.0);
        }
    }
    if params.contrast != 1.0 {
        let f = params.contrast as f32;
        let n = out.data().len() as f32;
        let mean: f32 = out.data().iter().sum::<f32>() / n;
        for v in out.data_mut() {
            *v = (mean + f * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if params.saturation != 1.0 && c == 3 {
        let f = params.saturation as f32;
        for px in out.data_mut().chunks_exact_mut(3) {
            let lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px {
                *v = (lum + f * (*v - lum)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Draw parameters from `config` and apply them: geometry first, then
/// photometry.
pub fn augment_sample(
    image: &Tensor<f32>,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let params = sample_params(config, rng);
    apply_with_params(image, &params)
}

/// Apply an explicit parameter set (used by previews and tests).
pub fn apply_with_params(image: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    apply_photometric(&apply_geometric(image, params), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, TAG_AUGMENT};

    fn image_1x3(values: [f32; 3]) -> Tensor<f32> {
        Tensor::from_dims(&[1, 3, 1], values.to_vec()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        let n = h * w;
        let data: Vec<f32> = (0..n).map(|i| i as f32 / (n - 1) as f32).collect();
        Tensor::from_dims(&[h, w, 1], data).unwrap()
    }

    #[test]
    fn sampled_params_respect_ranges_and_seed() {
        let config = AugmentConfig::default();
        config.validate().unwrap();
        let mut rng = stream(3, TAG_AUGMENT, 0, 0);
        for _ in 0..100 {
            let p = sample_params(&config, &mut rng);
            assert!((0.9..=1.1).contains(&p.zoom));
            assert!((-0.1..=0.1).contains(&p.shear));
            assert!((-0.1..=0.1).contains(&p.shift_x) && (-0.1..=0.1).contains(&p.shift_y));
            assert!((-0.1..=0.1).contains(&p.brightness));
            assert!((0.9..=1.1).contains(&p.contrast));
            assert!((0.9..=1.1).contains(&p.saturation));
        }
        let a = sample_params(&config, &mut stream(9, TAG_AUGMENT, 1, 2));
        let b = sample_params(&config, &mut stream(9, TAG_AUGMENT, 1, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn neutral_config_samples_the_exact_identity() {
        let mut rng = stream(1, TAG_AUGMENT, 0, 0);
        let p = sample_params(&AugmentConfig::neutral(), &mut rng);
        assert_eq!(p, AugmentParams::identity());
    }

    #[test]
    fn flip_probability_does_not_shift_other_draws() {
        let mut never = AugmentConfig::default();
        never.hflip_prob = 0.0;
        let mut always = AugmentConfig::default();
        always.hflip_prob = 1.0;
        let a = sample_params(&never, &mut stream(4, TAG_AUGMENT, 0, 0));
        let b = sample_params(&always, &mut stream(4, TAG_AUGMENT, 0, 0));
        assert!(!a.hflip && b.hflip);
        assert_eq!((a.zoom, a.shear, a.shift_x, a.brightness), (b.zoom, b.shear, b.shift_x, b.brightness));
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let mut c = AugmentConfig::default();
        c.zoom = (1.1, 0.9);
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.zoom = (0.0, 1.0);
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.hflip_prob = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_params_reproduce_the_input_exactly() {
        let img = ramp(5, 7);
        let out = apply_with_params(&img, &AugmentParams::identity());
        assert_eq!(out, img);
    }

    #[test]
    fn hflip_is_an_exact_mirror() {
        let img = image_1x3([0.1, 0.5, 0.9]);
        let mut p = AugmentParams::identity();
        p.hflip = true;
        let out = apply_geometric(&img, &p);
        assert_eq!(out.data(), &[0.9, 0.5, 0.1]);
        assert_eq!(apply_geometric(&out, &p), img);
    }

    #[test]
    fn whole_pixel_shift_replicates_the_leading_edge() {
        let img = image_1x3([0.1, 0.5, 0.9]);
        let mut p = AugmentParams::identity();
        p.shift_x = 1.0 / 3.0; // exactly one pixel on a width-3 image
        let out = apply_geometric(&img, &p);
        assert_eq!(out.data(), &[0.1, 0.1, 0.5]);
    }

    #[test]
    fn zoom_preserves_constant_images() {
        let img = Tensor::from_dims(&[4, 4, 1], vec![0.6; 16]).unwrap();
        let mut p = AugmentParams::identity();
        p.zoom = 1.7;
        let out = apply_geometric(&img, &p);
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn zoom_out_replicates_edges_rather_than_introducing_zeros() {
        let img = Tensor::from_dims(&[4, 4, 1], vec![1.0; 16]).unwrap();
        let mut p = AugmentParams::identity();
        p.zoom = 0.5; // shrink: output borders sample beyond the input frame
        let out = apply_geometric(&img, &p);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn brightness_adds_and_clamps() {
        let img = image_1x3([0.0, 0.5, 0.8]);
        let mut p = AugmentParams::identity();
        p.brightness = 0.5;
        let out = apply_photometric(&img, &p);
        assert_eq!(out.data(), &[0.5, 1.0, 1.0]);
    }

    #[test]
    fn contrast_scales_about_the_mean() {
        let img = image_1x3([0.0, 0.5, 1.0]); // mean 0.5
        let mut p = AugmentParams::identity();
        p.contrast = 0.5;
        let out = apply_photometric(&img, &p);
        assert_eq!(out.data(), &[0.25, 0.5, 0.75]);
    }

    #[test]
    fn saturation_zero_turns_rgb_gray_and_skips_single_channel() {
        let img = Tensor::from_dims(&[1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let mut p = AugmentParams::identity();
        p.saturation = 0.0;
        let out = apply_photometric(&img, &p);
        let lum = 0.299f32;
        for &v in out.data() {
            assert!((v - lum).abs() < 1e-6);
        }

        let gray = image_1x3([0.2, 0.4, 0.6]);
        let out = apply_photometric(&gray, &p);
        assert_eq!(out, gray, "saturation is undefined for single-channel images");
    }

    #[test]
    fn augment_sample_is_deterministic_per_stream() {
        let img = ramp(8, 8);
        let config = AugmentConfig::default();
        let a = augment_sample(&img, &config, &mut stream(11, TAG_AUGMENT, 2, 5));
        let b = augment_sample(&img, &config, &mut stream(11, TAG_AUGMENT, 2, 5));
        let c = augment_sample(&img, &config, &mut stream(11, TAG_AUGMENT, 2, 6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shear_tilts_columns_by_row_distance_from_centre() {
        // One bright column in the middle; after shearing, the bright pixel
        // in each row moves opposite to the row's offset from centre.
        let mut data = vec![0.0f32; 3 * 3];
        data[1] = 1.0; // (0,1)
        data[4] = 1.0; // (1,1)
        data[7] = 1.0; // (2,1)
        let img = Tensor::from_dims(&[3, 3, 1], data).unwrap();
        let mut p = AugmentParams::identity();
        p.shear = (1.0f64).atan(); // tan = 1: one pixel per row of centre distance
        let out = apply_geometric(&img, &p);
        // x' = x + tan*(y - cy): the centre row stays put, the top row's
        // bright pixel moves one left, the bottom row's one right.
        assert_eq!(out.get(&[1, 1, 0]), 1.0);
        assert_eq!(out.get(&[0, 0, 0]), 1.0);
        assert_eq!(out.get(&[2, 2, 0]), 1.0);
    }
}
