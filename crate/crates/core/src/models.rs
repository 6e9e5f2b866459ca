//! Model catalog and checkpoint persistence.
//!
//! Two architectures are built here: a compact three-block CNN for
//! single-channel 256x256 scans, and a VGG16 feature stack with a small
//! two-way head for 224x224 RGB input. Checkpoints serialize the model
//! description as JSON followed by raw `f32` tensors, with a checksum over
//! the whole file.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{
    init_params, shape_after, FeatureShape, LayerParams, LayerSpec, NnError, ParamSet,
};
use crate::tensor::{Element, Padding, Shape, Tensor};

#[derive(Debug)]
pub enum ModelError {
    /// Requested input extent cannot survive the model's pooling stages.
    InputTooSmall {
        model: &'static str,
        min: usize,
        got: (usize, usize),
    },
    Nn(NnError),
    Io(std::io::Error),
    /// File does not start with the checkpoint magic.
    BadMagic,
    /// File claims a format version this build cannot read.
    UnsupportedVersion(u8),
    /// File ends before the declared content does.
    Truncated,
    /// Stored checksum does not match the file contents.
    ChecksumMismatch,
    /// Header is not valid JSON for a model description.
    HeaderJson(String),
    /// A stored tensor's shape contradicts the model description.
    ShapeDisagreement {
        layer: usize,
        tensor: &'static str,
        expected: Shape,
        got: Shape,
    },
    /// Donor checkpoint cannot seed this model's convolutional stack.
    PretrainedMismatch(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InputTooSmall { model, min, got } => write!(
                f,
                "{model} needs input of at least {min}x{min}, got {}x{}",
                got.0, got.1
            ),
            ModelError::Nn(e) => write!(f, "{e}"),
            ModelError::Io(e) => write!(f, "{e}"),
            ModelError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            ModelError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint format version {v}")
            }
            ModelError::Truncated => write!(f, "checkpoint file is truncated"),
            ModelError::ChecksumMismatch => write!(f, "checkpoint checksum mismatch"),
            ModelError::HeaderJson(why) => write!(f, "bad checkpoint header: {why}"),
            ModelError::ShapeDisagreement {
                layer,
                tensor,
                expected,
                got,
            } => write!(
                f,
                "layer {layer} {tensor}: stored shape {got} does not match model shape {expected}"
            ),
            ModelError::PretrainedMismatch(why) => write!(f, "pretrained weights: {why}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        ModelError::Nn(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    SmallCnn,
    Vgg16,
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelName::SmallCnn => write!(f, "small_cnn"),
            ModelName::Vgg16 => write!(f, "vgg16"),
        }
    }
}

impl FromStr for ModelName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small_cnn" => Ok(ModelName::SmallCnn),
            "vgg16" => Ok(ModelName::Vgg16),
            other => Err(format!(
                "unknown model {other:?} (expected small_cnn or vgg16)"
            )),
        }
    }
}

/// A complete architecture description: what the network expects as input
/// and the layer stack to run. This is what a checkpoint stores, so a saved
/// model can be rebuilt without knowing how it was constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: ModelName,
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn input_shape(&self) -> FeatureShape {
        FeatureShape::Spatial {
            h: self.input_h,
            w: self.input_w,
            c: self.input_c,
        }
    }

    /// Validate the stack end to end; returns the output feature shape.
    pub fn validate(&self) -> Result<FeatureShape, NnError> {
        shape_after(&self.layers, self.input_shape())
    }

    /// Fresh seeded parameters for this architecture.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamSet<T>, NnError> {
        init_params(&self.layers, self.input_shape(), seed)
    }

    /// Expected weights/bias shapes per layer, `None` for parameterless ones.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Shape, Shape)>>, NnError> {
        let mut cur = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let slot = match *layer {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    let FeatureShape::Spatial { c, .. } = cur else {
                        return Err(NnError::BadSequence {
                            layer: i,
                            what: "conv2d needs a spatial input".into(),
                        });
                    };
                    Some((
                        Shape::new(&[kernel, kernel, c, filters])?,
                        Shape::new(&[filters])?,
                    ))
                }
                LayerSpec::Dense { units } => {
                    let FeatureShape::Flat { features } = cur else {
                        return Err(NnError::BadSequence {
                            layer: i,
                            what: "dense needs a flat input".into(),
                        });
                    };
                    Some((Shape::new(&[features, units])?, Shape::new(&[units])?))
                }
                _ => None,
            };
            out.push(slot);
            cur = crate::nn::layer_output_shape(layer, i, cur)?;
        }
        Ok(out)
    }
}

/// Smallest input extent for the compact CNN: three 2x2 poolings need at
/// least 8 pixels per axis.
pub const SMALL_CNN_MIN_INPUT: usize = 8;
/// Smallest input extent for VGG16: five 2x2 poolings need at least 32.
pub const VGG16_MIN_INPUT: usize = 32;

/// The compact CNN at its native 256x256 grayscale input.
pub fn build_small_cnn() -> ModelSpec {
    build_small_cnn_with_input(256, 256).expect("native input is valid")
}

/// The compact CNN on a custom input extent (grayscale): three blocks of
/// 32-filter 3x3 same-padded convolution, ReLU, and 2x2 max pooling, then a
/// 64-unit ReLU layer and a 2-way softmax head.
pub fn build_small_cnn_with_input(h: usize, w: usize) -> Result<ModelSpec, ModelError> {
    if h < SMALL_CNN_MIN_INPUT || w < SMALL_CNN_MIN_INPUT {
        return Err(ModelError::InputTooSmall {
            model: "small_cnn",
            min: SMALL_CNN_MIN_INPUT,
            got: (h, w),
        });
    }
    let mut layers = Vec::new();
    for _ in 0..3 {
        layers.push(LayerSpec::Conv2d {
            filters: 32,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { units: 64 });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { units: 2 });
    layers.push(LayerSpec::Softmax);
    Ok(ModelSpec {
        name: ModelName::SmallCnn,
        input_h: h,
        input_w: w,
        input_c: 1,
        layers,
    })
}

/// VGG16 at its native 224x224 RGB input.
pub fn build_vgg16() -> ModelSpec {
    build_vgg16_with_input(224, 224).expect("native input is valid")
}

/// VGG16 on a custom input extent (RGB): the standard thirteen-convolution
/// feature stack in five pooled blocks, then global average pooling, dropout
/// of one half, and a 2-way softmax head.
pub fn build_vgg16_with_input(h: usize, w: usize) -> Result<ModelSpec, ModelError> {
    if h < VGG16_MIN_INPUT || w < VGG16_MIN_INPUT {
        return Err(ModelError::InputTooSmall {
            model: "vgg16",
            min: VGG16_MIN_INPUT,
            got: (h, w),
        });
    }
    const BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut layers = Vec::new();
    for (filters, convs) in BLOCKS {
        for _ in 0..convs {
            layers.push(LayerSpec::Conv2d {
                filters,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dropout { rate: 0.5 });
    layers.push(LayerSpec::Dense { units: 2 });
    layers.push(LayerSpec::Softmax);
    Ok(ModelSpec {
        name: ModelName::Vgg16,
        input_h: h,
        input_w: w,
        input_c: 3,
        layers,
    })
}

/// Per-layer freeze mask for transfer learning: `true` for every
/// convolutional layer, `false` elsewhere (the head stays trainable).
pub fn conv_freeze_mask(spec: &ModelSpec) -> Vec<bool> {
    spec.layers
        .iter()
        .map(|l| matches!(l, LayerSpec::Conv2d { .. }))
        .collect()
}

// ── checkpoint format ──
//
// magic "CTCV" | version u8 | header_len u32 LE | header JSON
// | per parameterized layer: weights blob then bias blob
// | checksum u64 LE (FNV-1a over every preceding byte)
//
// blob: rank u8 | extent u32 LE per dim | f32 LE per element

const MAGIC: &[u8; 4] = b"CTCV";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs_trained: usize,
    pub best_val_accuracy: Option<f64>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    meta: CheckpointMeta,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn encode_blob(out: &mut Vec<u8>, tensor: &Tensor<f32>) {
    let dims = tensor.shape().dims();
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a checkpoint to bytes. The parameters must fit the model spec;
/// a disagreement is reported rather than written out.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>, ModelError> {
    let expected = ckpt.model.param_shapes()?;
    if expected.len() != ckpt.params.layers.len() {
        return Err(ModelError::PretrainedMismatch(format!(
            "parameter set has {} layers, model has {}",
            ckpt.params.layers.len(),
            expected.len()
        )));
    }
    for (i, (exp, got)) in expected.iter().zip(&ckpt.params.layers).enumerate() {
        match (exp, got) {
            (Some((w, b)), Some(p)) => {
                if p.weights.shape() != w {
                    return Err(ModelError::ShapeDisagreement {
                        layer: i,
                        tensor: "weights",
                        expected: w.clone(),
                        got: p.weights.shape().clone(),
                    });
                }
                if p.bias.shape() != b {
                    return Err(ModelError::ShapeDisagreement {
                        layer: i,
                        tensor: "bias",
                        expected: b.clone(),
                        got: p.bias.shape().clone(),
                    });
                }
            }
            (None, None) => {}
            _ => {
                return Err(ModelError::PretrainedMismatch(format!(
                    "layer {i}: parameter slot does not match the layer kind"
                )))
            }
        }
    }

    let header = serde_json::to_vec(&Header {
        model: ckpt.model.clone(),
        meta: ckpt.meta.clone(),
    })
    .map_err(|e| ModelError::HeaderJson(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for tensor in ckpt.params.tensors() {
        encode_blob(&mut out, tensor);
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        if end > self.bytes.len() {
            return Err(ModelError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes, verifying magic, version, checksum, and that every
/// stored tensor matches the shape the model description implies.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let header_len = r.u32()? as usize;
    // The trailing 8 bytes are the checksum; everything before them is hashed.
    if bytes.len() < r.pos + header_len + 8 {
        return Err(ModelError::Truncated);
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if fnv1a(&bytes[..body_end]) != stored {
        return Err(ModelError::ChecksumMismatch);
    }

    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| ModelError::HeaderJson(e.to_string()))?;
    let expected = header.model.param_shapes()?;

    let mut slots: Vec<Option<LayerParams<f32>>> = Vec::with_capacity(expected.len());
    for (layer, exp) in expected.iter().enumerate() {
        let Some((w_shape, b_shape)) = exp else {
            slots.push(None);
            continue;
        };
        let weights = decode_blob(&mut r, layer, "weights", w_shape, body_end)?;
        let bias = decode_blob(&mut r, layer, "bias", b_shape, body_end)?;
        slots.push(Some(LayerParams { weights, bias }));
    }
    if r.pos != body_end {
        // Extra bytes after the last declared tensor.
        return Err(ModelError::Truncated);
    }
    Ok(Checkpoint {
        model: header.model,
        meta: header.meta,
        params: ParamSet { layers: slots },
    })
}

fn decode_blob(
    r: &mut Reader<'_>,
    layer: usize,
    tensor: &'static str,
    expected: &Shape,
    body_end: usize,
) -> Result<Tensor<f32>, ModelError> {
    let rank = r.u8()? as usize;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(ModelError::HeaderJson(format!(
            "layer {layer} {tensor}: stored rank {rank} is invalid"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let got = Shape::new(&dims).map_err(|e| ModelError::HeaderJson(e.to_string()))?;
    if &got != expected {
        return Err(ModelError::ShapeDisagreement {
            layer,
            tensor,
            expected: expected.clone(),
            got,
        });
    }
    let count = got.elem_count();
    if r.pos + count * 4 > body_end {
        return Err(ModelError::Truncated);
    }
    let raw = r.take(count * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(got, data).map_err(|e| ModelError::Nn(e.into()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

/// Seed a model's convolutional stack from a donor checkpoint.
///
/// The donor's convolutional layers are matched to the target's in order and
/// must agree in count and shape; everything else (the head) is freshly
/// initialized from `seed`. Returns the combined parameter set.
pub fn import_pretrained_conv_weights(
    donor_path: &Path,
    target: &ModelSpec,
    seed: u64,
) -> Result<ParamSet<f32>, ModelError> {
    let donor = load_checkpoint(donor_path)?;
    let mut params: ParamSet<f32> = target.init_params(seed)?;

    let donor_convs: Vec<(usize, &LayerParams<f32>)> = donor
        .model
        .layers
        .iter()
        .zip(&donor.params.layers)
        .enumerate()
        .filter(|(_, (l, _))| matches!(l, LayerSpec::Conv2d { .. }))
        .map(|(i, (_, p))| (i, p.as_ref().expect("conv layer has params")))
        .collect();
    let target_convs: Vec<usize> = target
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. }))
        .map(|(i, _)| i)
        .collect();

    if donor_convs.len() != target_convs.len() {
        return Err(ModelError::PretrainedMismatch(format!(
            "donor has {} convolutional layers, this model has {}",
            donor_convs.len(),
            target_convs.len()
        )));
    }
    for (pos, (&target_idx, &(donor_idx, donor_params))) in
        target_convs.iter().zip(&donor_convs).enumerate()
    {
        let slot = params.layers[target_idx]
            .as_mut()
            .expect("conv layer has params");
        if slot.weights.shape() != donor_params.weights.shape() {
            return Err(ModelError::PretrainedMismatch(format!(
                "convolutional layer {pos} (model layer {target_idx}, donor layer {donor_idx}): \
                 donor weights {} do not fit expected {}",
                donor_params.weights.shape(),
                slot.weights.shape()
            )));
        }
        slot.weights = donor_params.weights.clone();
        slot.bias = donor_params.bias.clone();
    }
    Ok(params)
}
