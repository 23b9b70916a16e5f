//! Flat `key = value` configuration files.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected so a typo
//! in a hyperparameter name cannot silently fall back to a default.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `filters` | `16` | filters per layer, one value or a comma list (one per layer) |
//! | `layers` | `3` | conv layer count when `filters` is a single value |
//! | `kernel` | `7` | odd kernel size |
//! | `padding` | `same` | `same` or `valid` |
//! | `pooling` | `false` | 2×2 max pooling between consecutive conv layers |
//! | `epochs` | `60` | training epochs |
//! | `batch_size` | `50` | mini-batch size (images, before pos/neg doubling) |
//! | `lr` | `5e-5` | base Adam learning rate |
//! | `label_intensity` | `0.35` | K, weight of the label wave in the blend |
//! | `label_set` | `set1` | `set1` or `set2` |
//! | `label_mapping` | none | optional override file for the label waves |
//! | `seed` | `1` | master seed |
//! | `include_first_layer_loss` | `false` | train layer 1 and add its loss |
//! | `step_mode` | `combined` | `combined` or `sequential` pos/neg updates |
//! | `classifier_input` | `neutral` | `neutral` or `true-label-train` |
//! | `bp_lr` | `1e-3` | learning rate for the backprop baseline |
//! | `data_dir` | `data/mnist` | directory with the four IDX files |
//! | `train_limit` | `0` | use only the first N training images (0 = all) |
//! | `val_limit` | `0` | use only the first N validation images (0 = all) |
//! | `test_limit` | `0` | use only the first N test images (0 = all) |
//! | `split_seed` | `0` | seed of the 50k/10k train/validation split |
//! | `inference_mode` | `classifier` | `classifier` or `goodness` for `eval` |
//! | `out_dir` | `runs/default` | where artifacts are written |
//! | `sweep.*` | none | comma lists for `filters`, `kernel`, `batch_size`, `label_intensity`, `label_set`, `pooling`, `include_first_layer_loss` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, LabelSetId};
use crate::tensor::Padding;

pub const DEFAULT_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepMode {
    /// Positive and negative samples in one gradient step.
    Combined,
    /// A positive-only step followed by a negative-only step.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassifierInput {
    /// Unlabeled image at train and test time.
    Neutral,
    /// Positive (true-label) image while training, unlabeled at test time.
    TrueLabelTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    Classifier,
    Goodness,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "invalid {} '{}' (expected {})",
                        stringify!($ty), other, [$($text),+].join("|")
                    ))),
                }
            }
        }
    };
}

str_enum!(StepMode { Combined => "combined", Sequential => "sequential" });
str_enum!(ClassifierInput { Neutral => "neutral", TrueLabelTrain => "true-label-train" });
str_enum!(InferenceMode { Classifier => "classifier", Goodness => "goodness" });

/// Every hyperparameter that influences a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub padding: Padding,
    pub pooling: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub label_intensity: f32,
    pub label_set: LabelSetId,
    pub label_mapping: Option<PathBuf>,
    pub seed: u64,
    pub include_first_layer_loss: bool,
    pub step_mode: StepMode,
    pub classifier_input: ClassifierInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            filters: vec![16; DEFAULT_LAYERS],
            kernel: 7,
            padding: Padding::Same,
            pooling: false,
            epochs: 60,
            batch_size: 50,
            lr: 5e-5,
            label_intensity: 0.35,
            label_set: LabelSetId::Set1,
            label_mapping: None,
            seed: 1,
            include_first_layer_loss: false,
            step_mode: StepMode::Combined,
            classifier_input: ClassifierInput::Neutral,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.label_intensity) {
            return Err(Error::Config(format!(
                "label_intensity must be in [0,1], got {}",
                self.label_intensity
            )));
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("filters must list ≥ 1 positive counts".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.filters.len()
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        match &self.label_mapping {
            Some(path) => LabelSet::load_mapping(self.label_set, path),
            None => Ok(LabelSet::builtin(self.label_set)),
        }
    }
}

/// A full experiment: training hyperparameters plus data, output and sweep
/// settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub bp_lr: f32,
    pub data_dir: PathBuf,
    pub train_limit: usize,
    pub val_limit: usize,
    pub test_limit: usize,
    pub split_seed: u64,
    pub inference_mode: InferenceMode,
    pub out_dir: PathBuf,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            bp_lr: 1e-3,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: 0,
            val_limit: 0,
            test_limit: 0,
            split_seed: 0,
            inference_mode: InferenceMode::Classifier,
            out_dir: PathBuf::from("runs/default"),
            sweep: SweepGrid::default(),
        }
    }
}

/// Value lists for a Cartesian sweep. Empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub filters: Vec<Vec<usize>>,
    pub kernel: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub label_intensity: Vec<f32>,
    pub label_set: Vec<LabelSetId>,
    pub pooling: Vec<bool>,
    pub include_first_layer_loss: Vec<bool>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
            && self.kernel.is_empty()
            && self.batch_size.is_empty()
            && self.label_intensity.is_empty()
            && self.label_set.is_empty()
            && self.pooling.is_empty()
            && self.include_first_layer_loss.is_empty()
    }

    /// Number of cells in the Cartesian product.
    pub fn cell_count(&self) -> usize {
        [
            self.filters.len(),
            self.kernel.len(),
            self.batch_size.len(),
            self.label_intensity.len(),
            self.label_set.len(),
            self.pooling.len(),
            self.include_first_layer_loss.len(),
        ]
        .iter()
        .map(|&n| n.max(1))
        .product()
    }

    /// Expand into concrete training configs, first axis varying slowest.
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::with_capacity(self.cell_count());
        for filters in axis(&self.filters, base.filters.clone()) {
            for &kernel in &axis(&self.kernel, base.kernel) {
                for &batch_size in &axis(&self.batch_size, base.batch_size) {
                    for &k in &axis(&self.label_intensity, base.label_intensity) {
                        for &set in &axis(&self.label_set, base.label_set) {
                            for &pooling in &axis(&self.pooling, base.pooling) {
                                for &first in &axis(
                                    &self.include_first_layer_loss,
                                    base.include_first_layer_loss,
                                ) {
                                    out.push(TrainConfig {
                                        filters: filters.clone(),
                                        kernel,
                                        batch_size,
                                        label_intensity: k,
                                        label_set: set,
                                        pooling,
                                        include_first_layer_loss: first,
                                        ..base.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_list<T, F>(key: &str, value: &str, mut f: F) -> Result<Vec<T>>
where
    F: FnMut(&str, &str) -> Result<T>,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

/// Split text into `(key, value, line number)` triples.
fn tokenize(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut layers: Option<usize> = None;
        let mut seen = BTreeMap::new();
        for (key, value, line) in tokenize(text)? {
            if let Some(prev) = seen.insert(key.clone(), line) {
                return Err(Error::Config(format!(
                    "line {line}: key '{key}' already set on line {prev}"
                )));
            }
            cfg.set(&key, &value, &mut layers)
                .map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                    other => other,
                })?;
        }
        if cfg.train.filters.len() == 1 {
            cfg.train.filters = vec![cfg.train.filters[0]; layers.unwrap_or(DEFAULT_LAYERS)];
        } else if let Some(n) = layers {
            if cfg.train.filters.len() != n {
                return Err(Error::Config(format!(
                    "layers = {n} but filters lists {} values",
                    cfg.train.filters.len()
                )));
            }
        }
        let depth = cfg.train.filters.len();
        for cell in &mut cfg.sweep.filters {
            if cell.len() == 1 {
                *cell = vec![cell[0]; depth];
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, layers: &mut Option<usize>) -> Result<()> {
        let t = &mut self.train;
        match key {
            "filters" => t.filters = parse_list(key, value, parse_value)?,
            "layers" => *layers = Some(parse_value(key, value)?),
            "kernel" => t.kernel = parse_value(key, value)?,
            "padding" => t.padding = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "pooling" => t.pooling = parse_bool(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "label_intensity" => t.label_intensity = parse_value(key, value)?,
            "label_set" => {
                t.label_set = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "label_mapping" => t.label_mapping = Some(PathBuf::from(value)),
            "seed" => t.seed = parse_value(key, value)?,
            "include_first_layer_loss" => t.include_first_layer_loss = parse_bool(key, value)?,
            "step_mode" => t.step_mode = value.parse()?,
            "classifier_input" => t.classifier_input = value.parse()?,
            "bp_lr" => self.bp_lr = parse_value(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_limit" => self.train_limit = parse_value(key, value)?,
            "val_limit" => self.val_limit = parse_value(key, value)?,
            "test_limit" => self.test_limit = parse_value(key, value)?,
            "split_seed" => self.split_seed = parse_value(key, value)?,
            "inference_mode" => self.inference_mode = value.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "sweep.filters" => {
                // `16;32;64` sweeps uniform widths; `16/32/64` is one per-layer cell.
                self.sweep.filters = value
                    .split(';')
                    .map(|cell| parse_list(key, &cell.replace('/', ","), parse_value))
                    .collect::<Result<_>>()?
            }
            "sweep.kernel" => self.sweep.kernel = parse_list(key, value, parse_value)?,
            "sweep.batch_size" => self.sweep.batch_size = parse_list(key, value, parse_value)?,
            "sweep.label_intensity" => {
                self.sweep.label_intensity = parse_list(key, value, parse_value)?
            }
            "sweep.label_set" => {
                self.sweep.label_set = parse_list(key, value, |_, s| {
                    s.parse().map_err(|e: Error| Error::Config(e.to_string()))
                })?
            }
            "sweep.pooling" => self.sweep.pooling = parse_list(key, value, parse_bool)?,
            "sweep.include_first_layer_loss" => {
                self.sweep.include_first_layer_loss = parse_list(key, value, parse_bool)?
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical text: every key in a fixed order. Parsing it yields an equal
    /// config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("filters", join(&t.filters, ","));
        kv("kernel", t.kernel.to_string());
        kv("padding", t.padding.as_str().into());
        kv("pooling", t.pooling.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:e}", t.lr));
        kv("label_intensity", t.label_intensity.to_string());
        kv("label_set", t.label_set.as_str().into());
        if let Some(p) = &t.label_mapping {
            kv("label_mapping", p.display().to_string());
        }
        kv("seed", t.seed.to_string());
        kv("include_first_layer_loss", t.include_first_layer_loss.to_string());
        kv("step_mode", t.step_mode.as_str().into());
        kv("classifier_input", t.classifier_input.as_str().into());
        kv("bp_lr", format!("{:e}", self.bp_lr));
        kv("data_dir", self.data_dir.display().to_string());
        kv("train_limit", self.train_limit.to_string());
        kv("val_limit", self.val_limit.to_string());
        kv("test_limit", self.test_limit.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv("inference_mode", self.inference_mode.as_str().into());
        kv("out_dir", self.out_dir.display().to_string());
        let g = &self.sweep;
        if !g.filters.is_empty() {
            kv(
                "sweep.filters",
                g.filters.iter().map(|f| join(f, "/")).collect::<Vec<_>>().join(";"),
            );
        }
        if !g.kernel.is_empty() {
            kv("sweep.kernel", join(&g.kernel, ","));
        }
        if !g.batch_size.is_empty() {
            kv("sweep.batch_size", join(&g.batch_size, ","));
        }
        if !g.label_intensity.is_empty() {
            kv("sweep.label_intensity", join(&g.label_intensity, ","));
        }
        if !g.label_set.is_empty() {
            kv(
                "sweep.label_set",
                g.label_set.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            );
        }
        if !g.pooling.is_empty() {
            kv("sweep.pooling", join(&g.pooling, ","));
        }
        if !g.include_first_layer_loss.is_empty() {
            kv("sweep.include_first_layer_loss", join(&g.include_first_layer_loss, ","));
        }
        s
    }

    /// [`Self::to_text`] without `data_dir` and `out_dir`: everything that
    /// determines results and nothing that depends on where they are written.
    pub fn results_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("out_dir") && !l.starts_with("data_dir"))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// First 8 bytes of the SHA-256 of [`Self::results_text`], in hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.results_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same experiment with one training config swapped in (used by sweeps).
    pub fn with_train(&self, train: TrainConfig) -> Self {
        ExperimentConfig {
            train,
            sweep: SweepGrid::default(),
            ..self.clone()
        }
    }
}
