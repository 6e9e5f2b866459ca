//! Training loop, evaluation, and single-image prediction.
//!
//! One `(seed, augment_seed)` pair fully determines a run: parameter
//! initialization, per-epoch sample order, dropout masks, and augmentation
//! draws all come from tagged streams derived from them, so two runs with
//! the same configuration and data produce bit-identical parameters.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use crate::augment::{augment_sample, AugmentConfig};
use crate::data::{
    decode_and_resize, epoch_order, stack_batch, DataError, ImageSample, Label, SplitDataset,
};
use crate::metrics::{compute_auc, ConfusionMatrix, MetricsReport};
use crate::models::{Checkpoint, CheckpointMeta, ModelSpec};
use crate::nn::{
    backward_from_logits, cross_entropy_loss, forward, forward_train, optimizer_step, NnError,
    OptimizerConfig, OptimizerState, ParamSet,
};
use crate::rng::{stream, TAG_AUGMENT, TAG_DROPOUT};
use crate::tensor::Tensor;

/// Batch size used for validation/test passes regardless of the training
/// batch size; bounds eval memory without affecting results.
const EVAL_BATCH: usize = 8;

#[derive(Debug)]
pub enum TrainError {
    Data(DataError),
    Nn(NnError),
    /// The loss became NaN or infinite; names where training stopped.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// A split that the run needs has no samples.
    EmptySplit { which: &'static str },
    /// The freeze mask does not line up with the model's layers.
    BadFreezeMask { expected: usize, got: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Nn(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::EmptySplit { which } => write!(f, "{which} split is empty"),
            TrainError::BadFreezeMask { expected, got } => {
                write!(f, "freeze mask has {got} entries, model has {expected} layers")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Nn(e)
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    /// Epochs to run in this call (on top of `start_epoch`).
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for initialization, shuffling, and dropout.
    pub seed: u64,
    /// Augmentation applied to training samples only; `None` disables it.
    pub augment: Option<AugmentConfig>,
    /// Separate seed for augmentation draws (defaults to `seed` upstream).
    pub augment_seed: u64,
    /// Per-layer freeze flags; empty means nothing is frozen. Frozen layers
    /// receive no gradient and are never updated.
    pub freeze: Vec<bool>,
    /// Starting parameters (resume or transfer); `None` initializes from
    /// `seed`.
    pub initial_params: Option<ParamSet<f32>>,
    /// Epochs already trained before this call; epoch numbering, shuffling,
    /// and dropout streams continue from here on resume.
    pub start_epoch: usize,
    /// Best validation accuracy seen before this call (resume), so a
    /// continued run only saves a better checkpoint.
    pub initial_best_val_accuracy: Option<f64>,
}

/// One epoch's summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based absolute epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

/// Render epoch logs as CSV with a fixed header.
pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s\n");
    for l in logs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            l.epoch, l.train_loss, l.train_acc, l.val_loss, l.val_acc, l.wall_time_s
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters from the epoch with the highest validation accuracy
    /// (earliest such epoch on ties).
    pub best: Checkpoint,
    /// Parameters after the final epoch.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// The decision rule everywhere: a sample is called covid when the model
/// puts at least half its mass on the covid class.
pub fn is_covid_probability(p_covid: f64) -> bool {
    p_covid >= 0.5
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_images(
    root: &Path,
    samples: &[ImageSample],
    model: &ModelSpec,
) -> Result<Vec<Tensor<f32>>, DataError> {
    samples
        .iter()
        .map(|s| decode_and_resize(&root.join(&s.rel_path), model.input_h, model.input_w, model.input_c))
        .collect()
}

/// Count batch-level hits and collect per-sample covid probabilities.
fn score_batch(
    probs: &Tensor<f32>,
    labels: &[Label],
    confusion: &mut ConfusionMatrix,
    scored: &mut Vec<(f64, bool)>,
) {
    for (row, &label) in probs.data().chunks_exact(2).zip(labels) {
        let p_covid = row[1] as f64;
        let actual = label == Label::Covid;
        confusion.record(actual, is_covid_probability(p_covid));
        scored.push((p_covid, actual));
    }
}

/// Run a trained model over labeled samples and summarize the results.
/// No augmentation, dropout inactive; batches of [`EVAL_BATCH`].
pub fn evaluate(
    model: &ModelSpec,
    params: &ParamSet<f32>,
    root: &Path,
    samples: &[ImageSample],
) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit { which: "evaluation" });
    }
    let mut confusion = ConfusionMatrix::default();
    let mut scored = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0f64;
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = load_images(root, chunk, model)?;
        let labels: Vec<Label> = chunk.iter().map(|s| s.label).collect();
        let batch = stack_batch(&images, &labels)?;
        let probs = forward(&model.layers, params, batch.images)?;
        let loss = cross_entropy_loss(&probs, &batch.labels)?;
        loss_sum += loss.loss as f64 * chunk.len() as f64;
        score_batch(&probs, &labels, &mut confusion, &mut scored);
    }
    Ok(MetricsReport {
        confusion,
        loss: loss_sum / samples.len() as f64,
        auc: compute_auc(&scored),
    })
}

/// Classify one image file: returns the label and the covid probability.
pub fn predict(
    model: &ModelSpec,
    params: &ParamSet<f32>,
    image: &Path,
) -> Result<(Label, f64), TrainError> {
    let tensor = decode_and_resize(image, model.input_h, model.input_w, model.input_c)?;
    let batch = stack_batch(&[tensor], &[Label::Normal])?; // placeholder label, unused
    let probs = forward(&model.layers, params, batch.images)?;
    let p_covid = probs.data()[1] as f64;
    let label = if is_covid_probability(p_covid) {
        Label::Covid
    } else {
        Label::Normal
    };
    Ok((label, p_covid))
}

/// Train a model on the train split, validating after every epoch.
///
/// `on_epoch` fires after each epoch with its summary line. Returns the
/// best-validation-accuracy checkpoint (strictly better replaces, so ties
/// keep the earliest epoch), the final checkpoint, and the full log.
pub fn train(
    cfg: &TrainConfig,
    data: &SplitDataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput, TrainError> {
    cfg.model.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit { which: "val" });
    }
    let n_layers = cfg.model.layers.len();
    if !cfg.freeze.is_empty() && cfg.freeze.len() != n_layers {
        return Err(TrainError::BadFreezeMask {
            expected: n_layers,
            got: cfg.freeze.len(),
        });
    }
    let frozen = |i: usize| cfg.freeze.get(i).copied().unwrap_or(false);
    // Backward can stop below the lowest trainable parameterized layer.
    let first_trainable = (0..n_layers)
        .find(|&i| cfg.model.layers[i].has_params() && !frozen(i))
        .unwrap_or(n_layers);

    let mut params = match &cfg.initial_params {
        Some(p) => p.clone(),
        None => cfg.model.init_params(cfg.seed)?,
    };
    let mut opt_state = OptimizerState::new(&cfg.optimizer, &params);
    let batch_size = cfg.batch_size.max(1);

    let mut best_val_acc = cfg.initial_best_val_accuracy.unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let abs_epoch = cfg.start_epoch + e;
        let started = Instant::now();
        let order = epoch_order(data.train.len(), cfg.seed, abs_epoch as u64);

        let mut train_loss_sum = 0.0f64;
        let mut train_hits = 0usize;
        for (batch_idx, batch_indices) in order.chunks(batch_size).enumerate() {
            let samples: Vec<ImageSample> = batch_indices
                .iter()
                .map(|&i| data.train[i].clone())
                .collect();
            let mut images = load_images(&data.root, &samples, &cfg.model)?;
            if let Some(augment) = &cfg.augment {
                for (img, &sample_idx) in images.iter_mut().zip(batch_indices) {
                    let mut rng =
                        stream(cfg.augment_seed, TAG_AUGMENT, abs_epoch as u64, sample_idx as u64);
                    *img = augment_sample(img, augment, &mut rng);
                }
            }
            let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
            let batch = stack_batch(&images, &labels)?;

            let mut dropout_rng = stream(cfg.seed, TAG_DROPOUT, abs_epoch as u64, batch_idx as u64);
            let (probs, caches) =
                forward_train(&cfg.model.layers, &params, batch.images, &mut dropout_rng)?;
            let loss = cross_entropy_loss(&probs, &batch.labels)?;
            if !loss.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: abs_epoch + 1,
                    batch: batch_idx,
                });
            }
            train_loss_sum += loss.loss as f64 * labels.len() as f64;
            for (row, &label) in probs.data().chunks_exact(2).zip(&labels) {
                let hit = is_covid_probability(row[1] as f64) == (label == Label::Covid);
                train_hits += hit as usize;
            }

            let mut grads = backward_from_logits(
                &cfg.model.layers,
                &params,
                caches,
                loss.grad_logits,
                first_trainable,
            )?;
            for (i, slot) in grads.layers.iter_mut().enumerate() {
                if frozen(i) {
                    *slot = None;
                }
            }
            optimizer_step(&cfg.optimizer, &mut opt_state, &mut params, &grads)?;
        }

        let val = evaluate(&cfg.model, &params, &data.root, &data.val)
            .map_err(|e| match e {
                TrainError::EmptySplit { .. } => TrainError::EmptySplit { which: "val" },
                other => other,
            })?;
        let entry = EpochLog {
            epoch: abs_epoch + 1,
            train_loss: train_loss_sum / data.train.len() as f64,
            train_acc: train_hits as f64 / data.train.len() as f64,
            val_loss: val.loss,
            val_acc: val.confusion.accuracy(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);

        if entry.val_acc > best_val_acc {
            best_val_acc = entry.val_acc;
            best = Some(Checkpoint {
                model: cfg.model.clone(),
                meta: CheckpointMeta {
                    seed: cfg.seed,
                    epochs_trained: abs_epoch + 1,
                    best_val_accuracy: Some(best_val_acc),
                    created_unix: now_unix(),
                },
                params: params.clone(),
            });
        }
        log.push(entry);
    }

    let last = Checkpoint {
        model: cfg.model.clone(),
        meta: CheckpointMeta {
            seed: cfg.seed,
            epochs_trained: cfg.start_epoch + cfg.epochs,
            best_val_accuracy: if best_val_acc.is_finite() {
                Some(best_val_acc)
            } else {
                None
            },
            created_unix: now_unix(),
        },
        params,
    };
    // A resumed run that never beats its previous best still reports the
    // final parameters as "best" for this call's output.
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutput { best, last, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_log_csv_has_the_fixed_header() {
        let csv = epoch_log_csv(&[EpochLog {
            epoch: 1,
            train_loss: 0.6931471,
            train_acc: 0.5,
            val_loss: 0.7,
            val_acc: 0.25,
            wall_time_s: 1.2345,
        }]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s"
        );
        assert_eq!(lines.next().unwrap(), "1,0.693147,0.500000,0.700000,0.250000,1.234");
    }

    #[test]
    fn covid_threshold_is_inclusive() {
        assert!(is_covid_probability(0.5));
        assert!(is_covid_probability(0.75));
        assert!(!is_covid_probability(0.4999));
    }
}
