//! CPU deep-learning library for binary chest-CT classification.
//!
//! Everything runs on the CPU with no BLAS or framework dependency: a dense
//! N-d tensor with conv/pool/matmul kernels, layers with hand-written
//! reverse-mode gradients, builders for a small CNN (256x256 grayscale
//! input) and a VGG16 variant (224x224, global-average-pool head), an image
//! pipeline with stratified 60/20/20 splitting and on-the-fly augmentation,
//! and the usual binary-classification metrics (accuracy, precision,
//! recall, F1, AUC).
//!
//! Element precision is a type parameter: training and checkpoints use
//! `f32`, while gradient verification instantiates the same code at `f64`.
//! All randomness flows from explicit seeds through ChaCha streams, so
//! splits, initialization, augmentation, and training are reproducible
//! bit-for-bit on any platform.

pub mod augment;
pub mod data;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Element, Shape, Tensor};
