//! Flat `key = value` configuration files for training runs.
//!
//! One assignment per line; `#` starts a comment anywhere; blank lines are
//! ignored. Every key is optional at parse time — each subcommand decides
//! afterwards which ones it needs. Unknown keys, duplicate keys, and
//! malformed values are errors, so a typo cannot silently fall back to a
//! default.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ctnet_core::augment::AugmentConfig;
use ctnet_core::models::ModelName;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based line number; 0 when the problem is file-wide.
    pub line: usize,
    pub why: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.why)
        } else {
            write!(f, "line {}: {}", self.line, self.why)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Everything a configuration file can say, each entry optional.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub model: Option<ModelName>,
    pub input_size: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub ratios: Option<(f64, f64, f64)>,
    pub augment: Option<bool>,
    pub augment_seed: Option<u64>,
    pub augment_zoom: Option<(f64, f64)>,
    pub augment_hflip_prob: Option<f64>,
    pub augment_shear: Option<(f64, f64)>,
    pub augment_shift: Option<(f64, f64)>,
    pub augment_brightness: Option<(f64, f64)>,
    pub augment_contrast: Option<(f64, f64)>,
    pub augment_saturation: Option<(f64, f64)>,
    pub transfer: Option<bool>,
    pub pretrained: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

fn err(line: usize, why: impl Into<String>) -> ConfigError {
    ConfigError { line, why: why.into() }
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(err(line, format!("{key}: expected on or off, got `{value}`"))),
    }
}

/// A `lo,hi` pair.
fn parse_pair(line: usize, key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(err(line, format!("{key}: expected `low,high`, got `{value}`")));
    }
    Ok((
        parse_num(line, key, parts[0])?,
        parse_num(line, key, parts[1])?,
    ))
}

/// A `train,val,test` fraction triple. Also used for the `--ratios` flag.
pub fn parse_ratio_triple(value: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated fractions, got `{value}`"));
    }
    let mut out = [0.0f64; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| format!("cannot parse fraction `{part}`"))?;
    }
    Ok((out[0], out[1], out[2]))
}

pub fn parse_settings(text: &str) -> Result<Settings, ConfigError> {
    let mut s = Settings::default();
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(line, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(err(line, format!("{key}: empty value")));
        }
        if seen.contains(&key) {
            return Err(err(line, format!("duplicate key `{key}`")));
        }

        match key {
            "data_root" => s.data_root = Some(PathBuf::from(value)),
            "manifest" => s.manifest = Some(PathBuf::from(value)),
            "model" => {
                s.model = Some(ModelName::from_str(value).map_err(|e| err(line, e))?)
            }
            "input_size" => s.input_size = Some(parse_num(line, key, value)?),
            "epochs" => s.epochs = Some(parse_num(line, key, value)?),
            "batch_size" => s.batch_size = Some(parse_num(line, key, value)?),
            "optimizer" => {
                s.optimizer = Some(match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(err(line, format!("optimizer: expected adam or sgd, got `{value}`"))),
                })
            }
            "learning_rate" => s.learning_rate = Some(parse_num(line, key, value)?),
            "beta1" => s.beta1 = Some(parse_num(line, key, value)?),
            "beta2" => s.beta2 = Some(parse_num(line, key, value)?),
            "epsilon" => s.epsilon = Some(parse_num(line, key, value)?),
            "seed" => s.seed = Some(parse_num(line, key, value)?),
            "ratios" => {
                s.ratios = Some(parse_ratio_triple(value).map_err(|e| err(line, e))?)
            }
            "augment" => s.augment = Some(parse_bool(line, key, value)?),
            "augment_seed" => s.augment_seed = Some(parse_num(line, key, value)?),
            "augment_zoom" => s.augment_zoom = Some(parse_pair(line, key, value)?),
            "augment_hflip_prob" => s.augment_hflip_prob = Some(parse_num(line, key, value)?),
            "augment_shear" => s.augment_shear = Some(parse_pair(line, key, value)?),
            "augment_shift" => s.augment_shift = Some(parse_pair(line, key, value)?),
            "augment_brightness" => s.augment_brightness = Some(parse_pair(line, key, value)?),
            "augment_contrast" => s.augment_contrast = Some(parse_pair(line, key, value)?),
            "augment_saturation" => s.augment_saturation = Some(parse_pair(line, key, value)?),
            "transfer" => s.transfer = Some(parse_bool(line, key, value)?),
            "pretrained" => s.pretrained = Some(PathBuf::from(value)),
            "output_dir" => s.output_dir = Some(PathBuf::from(value)),
            _ => return Err(err(line, format!("unknown key `{key}`"))),
        }
        seen.push(key);
    }
    Ok(s)
}

/// Names of every augmentation-range key set in `settings`, used to reject
/// them when augmentation is off.
pub fn augment_range_keys(s: &Settings) -> Vec<&'static str> {
    let mut keys = Vec::new();
    if s.augment_zoom.is_some() {
        keys.push("augment_zoom");
    }
    if s.augment_hflip_prob.is_some() {
        keys.push("augment_hflip_prob");
    }
    if s.augment_shear.is_some() {
        keys.push("augment_shear");
    }
    if s.augment_shift.is_some() {
        keys.push("augment_shift");
    }
    if s.augment_brightness.is_some() {
        keys.push("augment_brightness");
    }
    if s.augment_contrast.is_some() {
        keys.push("augment_contrast");
    }
    if s.augment_saturation.is_some() {
        keys.push("augment_saturation");
    }
    keys
}

/// The augmentation policy a settings block describes: the standard ranges
/// with any per-field overrides applied. Not validated here.
pub fn augment_config(s: &Settings) -> AugmentConfig {
    let mut c = AugmentConfig::default();
    if let Some(v) = s.augment_zoom {
        c.zoom = v;
    }
    if let Some(v) = s.augment_hflip_prob {
        c.hflip_prob = v;
    }
    if let Some(v) = s.augment_shear {
        c.shear = v;
    }
    if let Some(v) = s.augment_shift {
        c.shift = v;
    }
    if let Some(v) = s.augment_brightness {
        c.brightness = v;
    }
    if let Some(v) = s.augment_contrast {
        c.contrast = v;
    }
    if let Some(v) = s.augment_saturation {
        c.saturation = v;
    }
    c
}
