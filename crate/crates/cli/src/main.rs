//! `ctnet` — train and run chest-CT classifiers from the command line.
//!
//! Subcommands cover the whole pipeline: `split` partitions a dataset
//! directory into a manifest, `train` fits a model from a configuration
//! file, `evaluate` scores a checkpoint, `predict` classifies one image,
//! and `augment-preview` renders augmentation draws for inspection.
//!
//! Exit codes: 0 success, 2 configuration or usage problem, 3 runtime
//! failure (unreadable data, corrupt checkpoint, diverged training).

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ctnet_core::augment::{augment_sample, AugmentConfig, AugmentError};
use ctnet_core::data::{
    decode_native, read_manifest, save_image_png, scan_dataset, stratified_split, write_manifest,
    DataError, ImageSample, Label, SplitDataset, SplitName,
};
use ctnet_core::metrics::MetricsError;
use ctnet_core::models::{
    build_small_cnn, build_small_cnn_with_input, build_vgg16, build_vgg16_with_input,
    conv_freeze_mask, import_pretrained_conv_weights, load_checkpoint, save_checkpoint,
    Checkpoint, ModelError, ModelName, ModelSpec,
};
use ctnet_core::nn::{NnError, OptimizerConfig};
use ctnet_core::rng::{stream, TAG_AUGMENT};
use ctnet_core::train::{epoch_log_csv, evaluate, predict, train, TrainConfig, TrainError};

use config::{
    augment_config, augment_range_keys, parse_ratio_triple, parse_settings, OptimizerKind,
    Settings,
};

// ── errors and exit codes ──

enum CliError {
    /// The request itself is wrong: bad config file, contradictory options.
    Config(String),
    /// The request is fine but carrying it out failed.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(DataError, ModelError, TrainError, NnError, MetricsError, AugmentError);

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn io_ctx(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

// ── command line ──

#[derive(Parser)]
#[command(
    name = "ctnet",
    version,
    about = "Train and run chest-CT covid/normal classifiers on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a dataset directory into train/val/test and write a manifest
    Split(SplitArgs),
    /// Train a model as described by a configuration file
    Train(TrainArgs),
    /// Score a checkpoint against labeled images
    Evaluate(EvaluateArgs),
    /// Classify a single image with a checkpoint
    Predict(PredictArgs),
    /// Render augmentation draws of one image for inspection
    AugmentPreview(AugmentPreviewArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset root containing covid/ and normal/ subdirectories
    #[arg(long)]
    data: PathBuf,
    /// Manifest file to write
    #[arg(long)]
    out: PathBuf,
    /// Train,val,test fractions (must sum to 1)
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_ratio_triple)]
    ratios: (f64, f64, f64),
    /// Shuffle seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file (flat `key = value` lines; see the README)
    #[arg(long)]
    config: PathBuf,
    /// Continue training from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to score
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluate every image under this dataset root (covid/ and normal/)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate one split of this manifest (requires --root)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset root the manifest's paths are relative to
    #[arg(long)]
    root: Option<PathBuf>,
    /// Which manifest split to score (train, val, or test; default test)
    #[arg(long)]
    split: Option<String>,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to classify with
    #[arg(long)]
    ckpt: PathBuf,
    /// Image file to classify
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct AugmentPreviewArgs {
    /// Image file to augment
    #[arg(long)]
    image: PathBuf,
    /// Directory to write variant_NN.png files into
    #[arg(long)]
    out: PathBuf,
    /// Number of variants to render
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Seed for the augmentation draws
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Optional configuration file; only its augment_* keys are used
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Split(args) => run_split(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Predict(args) => run_predict(args),
        Command::AugmentPreview(args) => run_augment_preview(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

// ── split ──

fn class_counts(samples: &[ImageSample]) -> (usize, usize) {
    let covid = samples.iter().filter(|s| s.label == Label::Covid).count();
    (covid, samples.len() - covid)
}

fn run_split(args: SplitArgs) -> Result<(), CliError> {
    let report = scan_dataset(&args.data)?;
    for (rel, why) in &report.skipped {
        eprintln!("skipping {rel}: {why}");
    }
    let split = stratified_split(&report.dataset, args.ratios, args.seed)?;
    write_manifest(&args.out, &split)?;
    for (name, samples) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let (covid, normal) = class_counts(samples);
        println!("{name} {} (covid {covid}, normal {normal})", samples.len());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ── train ──

/// Everything `train` derives from the settings file before touching data.
struct TrainPlan {
    model: ModelSpec,
    optimizer: OptimizerConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    augment: Option<AugmentConfig>,
    augment_seed: u64,
    data_root: PathBuf,
    manifest: Option<PathBuf>,
    ratios: (f64, f64, f64),
    output_dir: PathBuf,
    transfer: Option<PathBuf>,
}

fn read_settings(path: &Path) -> Result<Settings, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    parse_settings(&text).map_err(|e| config_err(format!("config {}: {e}", path.display())))
}

fn build_model(name: ModelName, input_size: Option<usize>) -> Result<ModelSpec, CliError> {
    let spec = match (name, input_size) {
        (ModelName::SmallCnn, None) => build_small_cnn(),
        (ModelName::Vgg16, None) => build_vgg16(),
        (ModelName::SmallCnn, Some(s)) => {
            build_small_cnn_with_input(s, s).map_err(|e| config_err(e.to_string()))?
        }
        (ModelName::Vgg16, Some(s)) => {
            build_vgg16_with_input(s, s).map_err(|e| config_err(e.to_string()))?
        }
    };
    Ok(spec)
}

fn make_plan(s: &Settings) -> Result<TrainPlan, CliError> {
    let model_name = s.model.ok_or_else(|| config_err("config: model is required"))?;
    let data_root = s
        .data_root
        .clone()
        .ok_or_else(|| config_err("config: data_root is required"))?;
    let output_dir = s
        .output_dir
        .clone()
        .ok_or_else(|| config_err("config: output_dir is required"))?;
    let model = build_model(model_name, s.input_size)?;

    let seed = s.seed.unwrap_or(42);
    let epochs = s.epochs.unwrap_or(match model_name {
        ModelName::SmallCnn => 25,
        ModelName::Vgg16 => 50,
    });
    if epochs == 0 {
        return Err(config_err("config: epochs must be at least 1"));
    }
    let batch_size = s.batch_size.unwrap_or(8);
    if batch_size == 0 {
        return Err(config_err("config: batch_size must be at least 1"));
    }

    let optimizer = match s.optimizer.unwrap_or(OptimizerKind::Adam) {
        OptimizerKind::Adam => OptimizerConfig::Adam {
            learning_rate: s.learning_rate.unwrap_or(1e-3),
            beta1: s.beta1.unwrap_or(0.9),
            beta2: s.beta2.unwrap_or(0.999),
            epsilon: s.epsilon.unwrap_or(1e-7),
        },
        OptimizerKind::Sgd => {
            for (set, key) in [
                (s.beta1.is_some(), "beta1"),
                (s.beta2.is_some(), "beta2"),
                (s.epsilon.is_some(), "epsilon"),
            ] {
                if set {
                    return Err(config_err(format!(
                        "config: {key} applies only to the adam optimizer"
                    )));
                }
            }
            OptimizerConfig::Sgd {
                learning_rate: s.learning_rate.unwrap_or(0.01),
            }
        }
    };

    // Augmentation is part of the pipeline by default; turning it off while
    // also tuning its ranges is contradictory.
    let augment_on = s.augment.unwrap_or(true);
    let augment = if augment_on {
        let cfg = augment_config(s);
        cfg.validate().map_err(|e| config_err(format!("config: {e}")))?;
        Some(cfg)
    } else {
        let stray = augment_range_keys(s);
        if let Some(key) = stray.first() {
            return Err(config_err(format!(
                "config: {key} is set but augment is off"
            )));
        }
        if s.augment_seed.is_some() {
            return Err(config_err("config: augment_seed is set but augment is off"));
        }
        None
    };

    let transfer = if s.transfer.unwrap_or(false) {
        let donor = s.pretrained.clone().ok_or_else(|| {
            config_err("config: transfer is on but pretrained names no checkpoint")
        })?;
        Some(donor)
    } else {
        if s.pretrained.is_some() {
            return Err(config_err("config: pretrained is set but transfer is off"));
        }
        None
    };

    Ok(TrainPlan {
        model,
        optimizer,
        epochs,
        batch_size,
        seed,
        augment,
        augment_seed: s.augment_seed.unwrap_or(seed),
        data_root,
        manifest: s.manifest.clone(),
        ratios: s.ratios.unwrap_or((0.6, 0.2, 0.2)),
        output_dir,
        transfer,
    })
}

/// Load the manifest named by the config, or derive one by scanning and
/// splitting the dataset (recording it next to the other outputs).
fn load_split(plan: &TrainPlan) -> Result<SplitDataset, CliError> {
    if let Some(manifest) = &plan.manifest {
        return Ok(read_manifest(manifest, &plan.data_root)?);
    }
    let report = scan_dataset(&plan.data_root)?;
    for (rel, why) in &report.skipped {
        eprintln!("skipping {rel}: {why}");
    }
    let split = stratified_split(&report.dataset, plan.ratios, plan.seed)?;
    let path = plan.output_dir.join("manifest.tsv");
    write_manifest(&path, &split)?;
    println!("wrote {}", path.display());
    Ok(split)
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let settings = read_settings(&args.config)?;
    let plan = make_plan(&settings)?;
    std::fs::create_dir_all(&plan.output_dir)
        .map_err(|e| io_ctx("cannot create output directory", &plan.output_dir, e))?;
    let split = load_split(&plan)?;

    let mut cfg = TrainConfig {
        model: plan.model.clone(),
        optimizer: plan.optimizer,
        epochs: plan.epochs,
        batch_size: plan.batch_size,
        seed: plan.seed,
        augment: plan.augment.clone(),
        augment_seed: plan.augment_seed,
        freeze: Vec::new(),
        initial_params: None,
        start_epoch: 0,
        initial_best_val_accuracy: None,
    };

    match (&args.resume, &plan.transfer) {
        (Some(_), Some(_)) => {
            return Err(config_err(
                "--resume and transfer are mutually exclusive: resuming restores the run's \
                 own parameters",
            ));
        }
        (Some(ckpt_path), None) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            if ckpt.model != cfg.model {
                return Err(config_err(format!(
                    "checkpoint {} holds a {} model that does not match this configuration",
                    ckpt_path.display(),
                    ckpt.model.name
                )));
            }
            if ckpt.meta.seed != cfg.seed {
                return Err(config_err(format!(
                    "checkpoint was trained with seed {}, config says {}; resuming would \
                     break reproducibility",
                    ckpt.meta.seed, cfg.seed
                )));
            }
            cfg.start_epoch = ckpt.meta.epochs_trained;
            cfg.initial_best_val_accuracy = ckpt.meta.best_val_accuracy;
            cfg.initial_params = Some(ckpt.params);
            println!(
                "resuming from {} at epoch {}",
                ckpt_path.display(),
                cfg.start_epoch
            );
        }
        (None, Some(donor)) => {
            cfg.initial_params =
                Some(import_pretrained_conv_weights(donor, &cfg.model, cfg.seed)?);
            cfg.freeze = conv_freeze_mask(&cfg.model);
            println!(
                "transfer: convolutional stack from {}, frozen; head trains from scratch",
                donor.display()
            );
        }
        (None, None) => {}
    }

    println!(
        "model {} ({}x{}x{}), {} epochs, batch size {}, seed {}",
        cfg.model.name, cfg.model.input_h, cfg.model.input_w, cfg.model.input_c,
        cfg.epochs, cfg.batch_size, cfg.seed
    );
    println!(
        "data: train {}, val {}, test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let total = cfg.start_epoch + cfg.epochs;
    let out = train(&cfg, &split, |log| {
        println!(
            "epoch {}/{total}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  ({:.1}s)",
            log.epoch, log.train_loss, log.train_acc, log.val_loss, log.val_acc, log.wall_time_s
        );
    })?;

    let log_path = plan.output_dir.join("log.csv");
    std::fs::write(&log_path, epoch_log_csv(&out.log))
        .map_err(|e| io_ctx("cannot write", &log_path, e))?;
    let best_path = plan.output_dir.join("best.ckpt");
    let last_path = plan.output_dir.join("last.ckpt");
    save_checkpoint(&last_path, &out.last)?;
    // A resumed run that never beats the checkpoint's recorded best gets the
    // final parameters back as `best`; writing those over an existing
    // best.ckpt would replace better parameters, so leave the file alone.
    let improved = cfg
        .initial_best_val_accuracy
        .map_or(true, |prev| out.best.meta.best_val_accuracy > Some(prev));
    if improved {
        save_checkpoint(&best_path, &out.best)?;
        if let Some(acc) = out.best.meta.best_val_accuracy {
            println!(
                "best validation accuracy {:.4} at epoch {}",
                acc, out.best.meta.epochs_trained
            );
        }
        println!(
            "wrote {}, {}, {}",
            best_path.display(),
            last_path.display(),
            log_path.display()
        );
    } else {
        println!(
            "validation accuracy never exceeded the resumed best ({:.4}); best.ckpt not rewritten",
            cfg.initial_best_val_accuracy.unwrap_or(f64::NAN)
        );
        println!("wrote {}, {}", last_path.display(), log_path.display());
    }
    Ok(())
}

// ── evaluate ──

/// The samples to score and the root their paths resolve against.
fn evaluation_set(args: &EvaluateArgs) -> Result<(PathBuf, Vec<ImageSample>), CliError> {
    match (&args.data, &args.manifest) {
        (Some(_), Some(_)) => Err(config_err("give either --data or --manifest, not both")),
        (None, None) => Err(config_err("one of --data or --manifest is required")),
        (Some(data), None) => {
            if args.split.is_some() {
                return Err(config_err("--split applies only to --manifest"));
            }
            if args.root.is_some() {
                return Err(config_err("--root applies only to --manifest"));
            }
            let report = scan_dataset(data)?;
            for (rel, why) in &report.skipped {
                eprintln!("skipping {rel}: {why}");
            }
            Ok((data.clone(), report.dataset.samples))
        }
        (None, Some(manifest)) => {
            let root = args
                .root
                .clone()
                .ok_or_else(|| config_err("--manifest requires --root"))?;
            let which = match &args.split {
                Some(s) => SplitName::from_str(s).map_err(config_err)?,
                None => SplitName::Test,
            };
            let split = read_manifest(manifest, &root)?;
            Ok((root, split.split(which).to_vec()))
        }
    }
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (root, samples) = evaluation_set(&args)?;
    let ckpt: Checkpoint = load_checkpoint(&args.ckpt)?;
    let report = evaluate(&ckpt.model, &ckpt.params, &root, &samples)?;
    if report.auc.is_none() {
        eprintln!("warning: AUC is undefined (evaluation set contains a single class)");
    }
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_text()).map_err(|e| io_ctx("cannot write", out, e))?;
    }
    Ok(())
}

// ── predict ──

fn run_predict(args: PredictArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let (label, p_covid) = predict(&ckpt.model, &ckpt.params, &args.image)?;
    println!("{label}\t{p_covid:.6}");
    Ok(())
}

// ── augment-preview ──

fn run_augment_preview(args: AugmentPreviewArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => {
            let settings = read_settings(path)?;
            let cfg = augment_config(&settings);
            cfg.validate().map_err(|e| config_err(format!("config: {e}")))?;
            cfg
        }
        None => AugmentConfig::default(),
    };
    let image = decode_native(&args.image)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| io_ctx("cannot create output directory", &args.out, e))?;
    for i in 0..args.n {
        let mut rng = stream(args.seed, TAG_AUGMENT, 0, i as u64);
        let variant = augment_sample(&image, &cfg, &mut rng);
        let path = args.out.join(format!("variant_{i:02}.png"));
        save_image_png(&path, &variant)?;
    }
    println!("wrote {} variants to {}", args.n, args.out.display());
    Ok(())
}
