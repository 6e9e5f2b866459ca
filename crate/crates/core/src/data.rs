//! Dataset handling: scanning a class-per-directory image tree, decoding and
//! resizing scans, stratified splitting, split manifests, and mini-batch
//! assembly.
//!
//! A dataset root must contain `covid/` and `normal/` subdirectories; every
//! PNG or JPEG below them (any nesting) is one sample, identified by its
//! path relative to the root. Samples are always kept in lexicographic
//! order, so every downstream seeded operation sees a stable sequence
//! regardless of filesystem enumeration order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageReader};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, TAG_SHUFFLE, TAG_SPLIT};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, err: std::io::Error },
    /// Root is missing one of the required class subdirectories.
    MissingClassDir { root: PathBuf, class: &'static str },
    Decode { path: PathBuf, why: String },
    /// Image decodes but is not 8 bits per channel.
    UnsupportedBitDepth { path: PathBuf, format: String },
    BadRatios { ratios: (f64, f64, f64), why: String },
    BadManifest { path: PathBuf, line: usize, why: String },
    EmptyDataset,
    Tensor(TensorError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, err } => write!(f, "{}: {err}", path.display()),
            DataError::MissingClassDir { root, class } => {
                write!(f, "{} has no {class}/ subdirectory", root.display())
            }
            DataError::Decode { path, why } => write!(f, "{}: {why}", path.display()),
            DataError::UnsupportedBitDepth { path, format } => write!(
                f,
                "{}: unsupported bit depth ({format}); only 8-bit images are accepted",
                path.display()
            ),
            DataError::BadRatios { ratios, why } => write!(
                f,
                "bad split ratios {:?}: {why}",
                [ratios.0, ratios.1, ratios.2]
            ),
            DataError::BadManifest { path, line, why } => {
                write!(f, "{}:{line}: {why}", path.display())
            }
            DataError::EmptyDataset => write!(f, "dataset contains no usable images"),
            DataError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        DataError::Tensor(e)
    }
}

fn io_err(path: &Path, err: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        err,
    }
}

/// Binary class label. `Covid` is the positive class (index 1) for every
/// metric downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Covid,
}

pub const CLASSES: [Label; 2] = [Label::Normal, Label::Covid];
pub const NUM_CLASSES: usize = 2;

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Covid => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Covid => "covid",
        }
    }

    /// One-hot row for the loss: `[P(normal), P(covid)]` target.
    pub fn one_hot(self) -> [f32; NUM_CLASSES] {
        match self {
            Label::Normal => [1.0, 0.0],
            Label::Covid => [0.0, 1.0],
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(Label::Normal),
            "covid" => Ok(Label::Covid),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// One sample: its path relative to the dataset root, and its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSample {
    pub rel_path: String,
    pub label: Label,
}

/// All usable samples under one root, in lexicographic `rel_path` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub root: PathBuf,
    pub samples: Vec<ImageSample>,
}

impl LabeledDataset {
    pub fn class_count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

/// Scan outcome: the dataset plus files that looked like images but could
/// not be read, with the reason each was skipped.
#[derive(Debug)]
pub struct ScanReport {
    pub dataset: LabeledDataset,
    pub skipped: Vec<(String, String)>,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            e == "png" || e == "jpg" || e == "jpeg"
        })
        .unwrap_or(false)
}

fn walk_class(
    root: &Path,
    label: Label,
    samples: &mut Vec<ImageSample>,
    skipped: &mut Vec<(String, String)>,
) -> Result<(), DataError> {
    let class_dir = root.join(label.name());
    if !class_dir.is_dir() {
        return Err(DataError::MissingClassDir {
            root: root.to_path_buf(),
            class: label.name(),
        });
    }
    let mut pending = vec![class_dir];
    while let Some(dir) = pending.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                pending.push(path);
                continue;
            }
            if !has_image_extension(&path) {
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walked path is under root")
                .to_string_lossy()
                .into_owned();
            // Cheap validation: parse just the image header.
            match ImageReader::open(&path)
                .map_err(|e| e.to_string())
                .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()))
            {
                Ok(_) => samples.push(ImageSample { rel_path: rel, label }),
                Err(why) => skipped.push((rel, why)),
            }
        }
    }
    Ok(())
}

/// Find every readable PNG/JPEG under `root/covid/` and `root/normal/`.
/// Files with an image extension that fail header parsing are reported in
/// the skip list rather than aborting the scan; other files are ignored.
pub fn scan_dataset(root: &Path) -> Result<ScanReport, DataError> {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for label in CLASSES {
        walk_class(root, label, &mut samples, &mut skipped)?;
    }
    samples.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    skipped.sort();
    Ok(ScanReport {
        dataset: LabeledDataset {
            root: root.to_path_buf(),
            samples,
        },
        skipped,
    })
}

// ── decoding and resizing ──

/// Decode an 8-bit image into floating-point channels in `[0, 1]`.
/// Returns `(h, w, c, data)` with `c` of 1 or 3; alpha is dropped.
fn decode_channels(path: &Path) -> Result<(usize, usize, usize, Vec<f32>), DataError> {
    let img = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            why: e.to_string(),
        })?;
    // Direct division gives the correctly-rounded v/255 per sample.
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(buf) => {
            (1, buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLumaA8(buf) => (
            1,
            buf.into_raw()
                .chunks_exact(2)
                .map(|px| px[0] as f32 / 255.0)
                .collect(),
        ),
        DynamicImage::ImageRgb8(buf) => {
            (3, buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageRgba8(buf) => (
            3,
            buf.into_raw()
                .chunks_exact(4)
                .flat_map(|px| px[..3].iter().map(|&v| v as f32 / 255.0).collect::<Vec<_>>())
                .collect(),
        ),
        other => {
            return Err(DataError::UnsupportedBitDepth {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    Ok((h, w, c, data))
}

/// ITU-R 601 luminance of an interleaved RGB pixel buffer.
fn rgb_to_gray(rgb: &[f32]) -> Vec<f32> {
    rgb.chunks_exact(3)
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect()
}

/// Bilinear resize of interleaved `h0 x w0 x c` data to `h1 x w1`.
///
/// Sample positions use the half-pixel convention
/// `src = (dst + 0.5) * old / new - 0.5`, clamped to the image, which keeps
/// content centred and preserves constant images exactly. A same-size call
/// returns the input untouched.
pub(crate) fn resize_bilinear(
    src: &[f32],
    h0: usize,
    w0: usize,
    c: usize,
    h1: usize,
    w1: usize,
) -> Vec<f32> {
    if h0 == h1 && w0 == w1 {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; h1 * w1 * c];
    let sy = h0 as f32 / h1 as f32;
    let sx = w0 as f32 / w1 as f32;
    for y in 0..h1 {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h0 - 1);
        let wy = fy - y0 as f32;
        for x in 0..w1 {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w0 - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w0 + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[(y * w1 + x) * c + ch] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Decode one image to a `h x w x channels` tensor of `[0, 1]` values.
///
/// Channel conversion happens at native resolution (RGB to gray by ITU-R 601
/// luminance; gray to RGB by replication), then a bilinear resize brings the
/// image to the requested extent.
pub fn decode_and_resize(
    path: &Path,
    h: usize,
    w: usize,
    channels: usize,
) -> Result<Tensor<f32>, DataError> {
    debug_assert!(channels == 1 || channels == 3);
    let (h0, w0, c0, data) = decode_channels(path)?;
    let converted = match (c0, channels) {
        (1, 1) | (3, 3) => data,
        (3, 1) => rgb_to_gray(&data),
        (1, 3) => data.iter().flat_map(|&v| [v, v, v]).collect(),
        _ => unreachable!("decode produces 1 or 3 channels"),
    };
    let resized = resize_bilinear(&converted, h0, w0, channels, h, w);
    Ok(Tensor::from_dims(&[h, w, channels], resized)?)
}

/// Decode one image at its native resolution and channel count (1 or 3,
/// alpha dropped), values in `[0, 1]`.
pub fn decode_native(path: &Path) -> Result<Tensor<f32>, DataError> {
    let (h, w, c, data) = decode_channels(path)?;
    Ok(Tensor::from_dims(&[h, w, c], data)?)
}

/// Write a `h x w x c` tensor (values clamped to `[0, 1]`) as a PNG.
pub fn save_image_png(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    let dims = image.shape().dims();
    let [h, w, c] = match *dims {
        [h, w, c] if c == 1 || c == 3 => [h, w, c],
        _ => {
            return Err(DataError::Decode {
                path: path.to_path_buf(),
                why: format!("cannot encode tensor of shape {} as an image", image.shape()),
            })
        }
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let result = if c == 1 {
        image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches")
            .save(path)
    } else {
        image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches")
            .save(path)
    };
    result.map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        why: e.to_string(),
    })
}

// ── stratified splitting ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?} (expected train, val, or test)")),
        }
    }
}

/// A dataset partitioned into train/val/test, each in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub root: PathBuf,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl SplitDataset {
    pub fn split(&self, which: SplitName) -> &[ImageSample] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Partition `dataset` into train/val/test with per-class proportions.
///
/// Each class is shuffled by its own stream derived from `seed`, then cut at
/// `round(r_train * n)` and `round((r_train + r_val) * n)`, so the class
/// balance of every split matches the overall dataset as closely as rounding
/// allows. Ratios must be non-negative and sum to 1.
pub fn stratified_split(
    dataset: &LabeledDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDataset, DataError> {
    let (r_train, r_val, r_test) = ratios;
    if !(r_train >= 0.0 && r_val >= 0.0 && r_test >= 0.0) {
        return Err(DataError::BadRatios {
            ratios,
            why: "ratios must be non-negative".into(),
        });
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios {
            ratios,
            why: "ratios must sum to 1".into(),
        });
    }
    if dataset.samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for label in CLASSES {
        let mut class: Vec<&ImageSample> = dataset
            .samples
            .iter()
            .filter(|s| s.label == label)
            .collect();
        let mut rng = stream(seed, TAG_SPLIT, label.class_index() as u64, 0);
        class.shuffle(&mut rng);
        let n = class.len();
        let cut1 = (r_train * n as f64).round() as usize;
        let cut2 = ((r_train + r_val) * n as f64).round() as usize;
        train.extend(class[..cut1].iter().map(|s| (*s).clone()));
        val.extend(class[cut1..cut2].iter().map(|s| (*s).clone()));
        test.extend(class[cut2..].iter().map(|s| (*s).clone()));
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    }
    Ok(SplitDataset {
        root: dataset.root.clone(),
        train,
        val,
        test,
    })
}

// ── manifests ──

/// Render a split as its manifest: one `rel_path<TAB>label<TAB>split` line
/// per sample, train block first, then val, then test.
pub fn manifest_string(split: &SplitDataset) -> String {
    let mut out = String::new();
    for which in [SplitName::Train, SplitName::Val, SplitName::Test] {
        for sample in split.split(which) {
            out.push_str(&sample.rel_path);
            out.push('\t');
            out.push_str(sample.label.name());
            out.push('\t');
            out.push_str(which.name());
            out.push('\n');
        }
    }
    out
}

pub fn write_manifest(path: &Path, split: &SplitDataset) -> Result<(), DataError> {
    std::fs::write(path, manifest_string(split)).map_err(|e| io_err(path, e))
}

/// Parse a manifest file, resolving sample paths against `root`. Lines may
/// arrive in any order; each split is re-sorted lexicographically. The file
/// itself is not checked against the filesystem here — missing images
/// surface when they are first loaded.
pub fn read_manifest(path: &Path, root: &Path) -> Result<SplitDataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut split = SplitDataset {
        root: root.to_path_buf(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |why: String| DataError::BadManifest {
            path: path.to_path_buf(),
            line: i + 1,
            why,
        };
        let mut fields = line.split('\t');
        let (Some(rel_path), Some(label), Some(which), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(bad("expected three tab-separated fields".into()));
        };
        if rel_path.is_empty() {
            return Err(bad("empty path".into()));
        }
        let label: Label = label.parse().map_err(bad)?;
        let which: SplitName = which.parse().map_err(bad)?;
        let sample = ImageSample {
            rel_path: rel_path.to_string(),
            label,
        };
        match which {
            SplitName::Train => split.train.push(sample),
            SplitName::Val => split.val.push(sample),
            SplitName::Test => split.test.push(sample),
        }
    }
    if split.train.is_empty() && split.val.is_empty() && split.test.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    }
    Ok(split)
}

// ── batching ──

/// A batch ready for the network: stacked images and one-hot labels.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    /// `B x H x W x C`
    pub images: Tensor<f32>,
    /// `B x 2`, rows from [`Label::one_hot`]
    pub labels: Tensor<f32>,
}

/// Stack per-sample `H x W x C` tensors into one `B x H x W x C` batch with
/// one-hot labels.
pub fn stack_batch(images: &[Tensor<f32>], labels: &[Label]) -> Result<MiniBatch, DataError> {
    assert_eq!(images.len(), labels.len());
    let Some(first) = images.first() else {
        return Err(DataError::EmptyDataset);
    };
    let [h, w, c] = match *first.shape().dims() {
        [h, w, c] => [h, w, c],
        _ => {
            return Err(DataError::Tensor(TensorError::RankMismatch {
                op: "stack_batch",
                expected: 3,
                got: first.shape().clone(),
            }))
        }
    };
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.shape() != first.shape() {
            return Err(DataError::Tensor(TensorError::ShapeMismatch {
                op: "stack_batch",
                left: first.shape().clone(),
                right: img.shape().clone(),
            }));
        }
        data.extend_from_slice(img.data());
    }
    let mut label_rows = Vec::with_capacity(labels.len() * NUM_CLASSES);
    for l in labels {
        label_rows.extend_from_slice(&l.one_hot());
    }
    Ok(MiniBatch {
        images: Tensor::from_dims(&[images.len(), h, w, c], data)?,
        labels: Tensor::from_dims(&[labels.len(), NUM_CLASSES], label_rows)?,
    })
}

/// Visiting order for one training epoch: a seeded permutation of `0..n`
/// that depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, TAG_SHUFFLE, epoch, 0);
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};

    fn write_gray(path: &Path, w: u32, h: u32, value: u8) {
        let img = GrayImage::from_pixel(w, h, Luma([value]));
        img.save(path).unwrap();
    }

    fn make_dataset(dir: &Path, covid: usize, normal: usize) {
        std::fs::create_dir_all(dir.join("covid")).unwrap();
        std::fs::create_dir_all(dir.join("normal")).unwrap();
        for i in 0..covid {
            write_gray(&dir.join(format!("covid/c{i:03}.png")), 4, 4, 200);
        }
        for i in 0..normal {
            write_gray(&dir.join(format!("normal/n{i:03}.png")), 4, 4, 40);
        }
    }

    #[test]
    fn scan_finds_sorts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 3, 2);
        std::fs::write(dir.path().join("covid/notes.txt"), "not an image").unwrap();
        std::fs::write(dir.path().join("covid/broken.png"), b"garbage").unwrap();
        // nested directories are walked too
        std::fs::create_dir_all(dir.path().join("normal/extra")).unwrap();
        write_gray(&dir.path().join("normal/extra/deep.JPG"), 4, 4, 10);

        let report = scan_dataset(dir.path()).unwrap();
        let rels: Vec<&str> = report
            .dataset
            .samples
            .iter()
            .map(|s| s.rel_path.as_str())
            .collect();
        assert_eq!(
            rels,
            [
                "covid/c000.png",
                "covid/c001.png",
                "covid/c002.png",
                "normal/extra/deep.JPG",
                "normal/n000.png",
                "normal/n001.png"
            ]
        );
        assert_eq!(report.dataset.class_count(Label::Covid), 3);
        assert_eq!(report.dataset.class_count(Label::Normal), 3);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "covid/broken.png");
    }

    #[test]
    fn scan_requires_both_class_directories() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("covid")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::MissingClassDir { class: "normal", .. }));
    }

    #[test]
    fn decode_scales_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        write_gray(&path, 2, 2, 51);
        let t = decode_and_resize(&path, 2, 2, 1).unwrap();
        assert_eq!(t.shape().dims(), &[2, 2, 1]);
        for &v in t.data() {
            assert_eq!(v, 51.0 / 255.0);
        }
    }

    #[test]
    fn decode_converts_rgb_to_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        RgbImage::from_pixel(1, 1, Rgb([255, 0, 0])).save(&path).unwrap();
        let t = decode_and_resize(&path, 1, 1, 1).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn decode_ignores_alpha_and_replicates_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        RgbaImage::from_pixel(1, 1, Rgba([10, 20, 30, 0])).save(&path).unwrap();
        let t = decode_and_resize(&path, 1, 1, 3).unwrap();
        assert_eq!(t.data().len(), 3);
        assert!((t.data()[0] - 10.0 / 255.0).abs() < 1e-6);

        let gray = dir.path().join("gray.png");
        write_gray(&gray, 1, 1, 100);
        let t = decode_and_resize(&gray, 1, 1, 3).unwrap();
        let v = 100.0 / 255.0;
        assert_eq!(t.data(), &[v, v, v]);
    }

    #[test]
    fn native_decode_round_trips_saved_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("native.png");
        let values: Vec<f32> = [3u8, 60, 128, 200, 255, 0]
            .iter()
            .map(|&v| v as f32 / 255.0)
            .collect();
        let img = Tensor::from_dims(&[2, 3, 1], values.clone()).unwrap();
        save_image_png(&path, &img).unwrap();
        let back = decode_native(&path).unwrap();
        assert_eq!(back.shape().dims(), &[2, 3, 1]);
        assert_eq!(back.data(), values.as_slice());
    }

    #[test]
    fn sixteen_bit_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img: image::ImageBuffer<Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_pixel(2, 2, Luma([40_000u16]));
        img.save(&path).unwrap();
        let err = decode_and_resize(&path, 2, 2, 1).unwrap_err();
        assert!(matches!(err, DataError::UnsupportedBitDepth { .. }), "{err}");
    }

    #[test]
    fn resize_centre_of_upscaled_checkerboard_is_one_half() {
        let src = [1.0f32, 0.0, 0.0, 1.0];
        let out = resize_bilinear(&src, 2, 2, 1, 3, 3);
        assert_eq!(out.len(), 9);
        assert!((out[4] - 0.5).abs() < 1e-6, "centre was {}", out[4]);
    }

    #[test]
    fn resize_preserves_constants_and_same_size_is_identity() {
        let src = vec![0.73f32; 5 * 7 * 3];
        for &(h, w) in &[(3usize, 4usize), (9, 2), (5, 7), (11, 13)] {
            let out = resize_bilinear(&src, 5, 7, 3, h, w);
            assert!(out.iter().all(|&v| (v - 0.73).abs() < 1e-6));
        }
        let src: Vec<f32> = (0..12).map(|v| v as f32 / 11.0).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 1, 3, 4), src);
    }

    fn synthetic_dataset(covid: usize, normal: usize) -> LabeledDataset {
        let mut samples = Vec::new();
        for i in 0..covid {
            samples.push(ImageSample {
                rel_path: format!("covid/c{i:04}.png"),
                label: Label::Covid,
            });
        }
        for i in 0..normal {
            samples.push(ImageSample {
                rel_path: format!("normal/n{i:04}.png"),
                label: Label::Normal,
            });
        }
        samples.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
        LabeledDataset {
            root: PathBuf::from("/unused"),
            samples,
        }
    }

    #[test]
    fn split_counts_round_per_class() {
        let split = stratified_split(&synthetic_dataset(10, 10), (0.6, 0.2, 0.2), 42).unwrap();
        assert_eq!(split.train.len(), 12);
        assert_eq!(split.val.len(), 4);
        assert_eq!(split.test.len(), 4);
        for part in [&split.train, &split.val, &split.test] {
            let covid = part.iter().filter(|s| s.label == Label::Covid).count();
            assert_eq!(covid * 2, part.len(), "each split stays balanced");
        }

        // n = 7 per class: cuts at round(4.2) = 4 and round(5.6) = 6
        let split = stratified_split(&synthetic_dataset(7, 0), (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (4, 2, 1)
        );
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let ds = synthetic_dataset(30, 30);
        let a = stratified_split(&ds, (0.6, 0.2, 0.2), 7).unwrap();
        let b = stratified_split(&ds, (0.6, 0.2, 0.2), 7).unwrap();
        let c = stratified_split(&ds, (0.6, 0.2, 0.2), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
        // Membership is disjoint and complete.
        let mut all: Vec<&str> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|s| s.rel_path.as_str())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 60);
    }

    #[test]
    fn split_validates_ratios() {
        let ds = synthetic_dataset(4, 4);
        assert!(matches!(
            stratified_split(&ds, (0.5, 0.2, 0.2), 1).unwrap_err(),
            DataError::BadRatios { .. }
        ));
        assert!(matches!(
            stratified_split(&ds, (1.2, -0.1, -0.1), 1).unwrap_err(),
            DataError::BadRatios { .. }
        ));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let split = stratified_split(&synthetic_dataset(5, 5), (0.6, 0.2, 0.2), 3).unwrap();
        let path = dir.path().join("split.tsv");
        write_manifest(&path, &split).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first.split('\t').count(), 3);
        assert!(first.ends_with("\ttrain"));

        let back = read_manifest(&path, Path::new("/unused")).unwrap();
        assert_eq!(back, split);
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a.png\tcovid\ttrain\nb.png\tmaybe\tval\n").unwrap();
        let err = read_manifest(&path, Path::new("/")).unwrap_err();
        match err {
            DataError::BadManifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn stack_builds_one_hot_rows() {
        let a = Tensor::from_dims(&[1, 1, 1], vec![0.25]).unwrap();
        let b = Tensor::from_dims(&[1, 1, 1], vec![0.75]).unwrap();
        let batch = stack_batch(&[a, b], &[Label::Covid, Label::Normal]).unwrap();
        assert_eq!(batch.images.shape().dims(), &[2, 1, 1, 1]);
        assert_eq!(batch.labels.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(100, 5, 0);
        let b = epoch_order(100, 5, 0);
        let c = epoch_order(100, 5, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
