//! Run configuration: command-line flags merged over an optional line-based
//! `key=value` file. Flags win over file values, file values win over
//! defaults, and unknown file keys are rejected before any work starts.

use ivmetric_core::data::DatasetKind;
use ivmetric_core::error::{Error, Result};
use ivmetric_core::losses::MsLossConfig;
use ivmetric_core::models::{LossKind, PresetName};
use ivmetric_core::optim::AdamConfig;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "data-dir",
    "preset",
    "loss",
    "epochs",
    "batch-size",
    "seed",
    "lr",
    "ms-alpha",
    "ms-beta",
    "ms-lambda",
    "ms-epsilon",
    "ms-classes",
    "ms-per-class",
    "out-dir",
    "threads",
    "train-limit",
    "test-limit",
];

/// Raw optional values from flags, before file/default resolution.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct RunFlags {
    /// Dataset name: mnist, fashion-mnist, or cifar10
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the dataset's distribution files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Architecture preset (cnn3a, cnn3b, inn2..inn4, hybrid1..hybrid3)
    #[arg(long)]
    pub preset: Option<String>,
    /// Training objective: ce or ms
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size for shuffled (cross-entropy) batches
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Multi-similarity positive scale
    #[arg(long)]
    pub ms_alpha: Option<f64>,
    /// Multi-similarity negative scale
    #[arg(long)]
    pub ms_beta: Option<f64>,
    /// Multi-similarity threshold
    #[arg(long)]
    pub ms_lambda: Option<f64>,
    /// Multi-similarity mining margin
    #[arg(long)]
    pub ms_epsilon: Option<f64>,
    /// Distinct classes per class-balanced batch
    #[arg(long)]
    pub ms_classes: Option<usize>,
    /// Samples per class in a class-balanced batch
    #[arg(long)]
    pub ms_per_class: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for internal parallelism; 1 is the determinism mode
    #[arg(long)]
    pub threads: Option<usize>,
    /// Cap on training samples (seeded subset)
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Cap on test samples (seeded subset)
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Optional key=value configuration file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Fully resolved and validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub preset: PresetName,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub ms: MsLossConfig,
    pub ms_classes: usize,
    pub ms_per_class: usize,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "{}:{}: expected key=value, got '{}'",
                path.display(),
                lineno + 1,
                line
            )));
        };
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::config(format!(
                "{}:{}: unknown configuration key '{}'",
                path.display(),
                lineno + 1,
                key
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parsed<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
            Error::config(format!("configuration key '{}' has invalid value '{}'", key, raw))
        }),
    }
}

impl RunFlags {
    /// Merge flags over the optional file and defaults into a validated
    /// configuration.
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => parse_config_file(path)?,
            None => HashMap::new(),
        };

        let dataset_name = self
            .dataset
            .clone()
            .or_else(|| file.get("dataset").cloned())
            .unwrap_or_else(|| "mnist".to_string());
        let preset_name = self
            .preset
            .clone()
            .or_else(|| file.get("preset").cloned())
            .unwrap_or_else(|| "hybrid1".to_string());
        let loss_name = self
            .loss
            .clone()
            .or_else(|| file.get("loss").cloned())
            .unwrap_or_else(|| "ce".to_string());

        let cfg = RunConfig {
            dataset: DatasetKind::parse(&dataset_name)?,
            data_dir: self
                .data_dir
                .clone()
                .or_else(|| file.get("data-dir").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data")),
            preset: PresetName::parse(&preset_name)?,
            loss: LossKind::parse(&loss_name)?,
            epochs: self.epochs.or(parsed(&file, "epochs")?).unwrap_or(20),
            batch_size: self.batch_size.or(parsed(&file, "batch-size")?).unwrap_or(64),
            seed: self.seed.or(parsed(&file, "seed")?).unwrap_or(0),
            adam: AdamConfig::with_lr(self.lr.or(parsed(&file, "lr")?).unwrap_or(0.001)),
            ms: MsLossConfig {
                alpha: self.ms_alpha.or(parsed(&file, "ms-alpha")?).unwrap_or(2.0),
                beta: self.ms_beta.or(parsed(&file, "ms-beta")?).unwrap_or(50.0),
                lambda: self.ms_lambda.or(parsed(&file, "ms-lambda")?).unwrap_or(1.0),
                epsilon: self.ms_epsilon.or(parsed(&file, "ms-epsilon")?).unwrap_or(0.1),
            },
            ms_classes: self.ms_classes.or(parsed(&file, "ms-classes")?).unwrap_or(8),
            ms_per_class: self
                .ms_per_class
                .or(parsed(&file, "ms-per-class")?)
                .unwrap_or(8),
            out_dir: self
                .out_dir
                .clone()
                .or_else(|| file.get("out-dir").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out")),
            threads: self.threads.or(parsed(&file, "threads")?).unwrap_or(0),
            train_limit: self.train_limit.or(parsed(&file, "train-limit")?),
            test_limit: self.test_limit.or(parsed(&file, "test-limit")?),
        };

        if cfg.epochs > 10_000 {
            return Err(Error::config(format!("implausible epoch count {}", cfg.epochs)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if cfg.adam.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                cfg.adam.lr
            )));
        }
        cfg.ms.validate()?;
        if cfg.ms_classes == 0 || cfg.ms_per_class < 2 {
            return Err(Error::config(
                "class-balanced batches need ms-classes >= 1 and ms-per-class >= 2",
            ));
        }
        Ok(cfg)
    }
}
