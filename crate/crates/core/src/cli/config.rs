//! Run configuration: one TOML file, `--set key=value` overrides and the
//! `RA_SEED` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::data::{load_cifar10_dir, load_mnist_dir, split, synth_dataset, DatasetKind, SplitSpec};
use crate::error::{Error, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{ModelKind, ModelSpec};
use crate::trainloop::{Method, TrainConfig, TrainData};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "RA_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// MNIST IDX files (`train-*` and `t10k-*`) in `path`.
    Mnist,
    /// CIFAR-10 binary batches in `path`.
    Cifar10,
    /// Generated Gaussian-blob images; needs no files.
    #[default]
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Keep only the first `train_limit` training images before splitting.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_classes: usize,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = SplitSpec::default();
        Self {
            source: DataSource::Synth,
            path: None,
            train_limit: None,
            test_limit: None,
            validation_fraction: split.validation_fraction,
            split_seed: split.split_seed,
            synth_train: 600,
            synth_test: 200,
            synth_classes: 4,
            synth_seed: 0,
        }
    }
}

impl DataConfig {
    fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            validation_fraction: self.validation_fraction,
            split_seed: self.split_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        match self.source {
            DataSource::Synth => {
                if self.synth_train < 2 || self.synth_test == 0 {
                    return Err(Error::config("data.synth_train", "need at least 2 training and 1 test image"));
                }
                if self.synth_classes < 2 {
                    return Err(Error::config("data.synth_classes", "need at least two classes"));
                }
            }
            DataSource::Mnist | DataSource::Cifar10 => {
                if self.path.is_none() {
                    return Err(Error::config("data.path", "required for file-backed datasets"));
                }
            }
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::config("data.train_limit", "limits must be at least 1"));
        }
        Ok(())
    }

    /// Loads, truncates and splits the configured dataset.
    pub fn load(&self) -> Result<TrainData> {
        let (train, test, kind) = match self.source {
            DataSource::Synth => (
                synth_dataset(self.synth_train, self.synth_classes, self.synth_seed)?,
                synth_dataset(self.synth_test, self.synth_classes, self.synth_seed.wrapping_add(1))?,
                DatasetKind::Digits,
            ),
            DataSource::Mnist | DataSource::Cifar10 => {
                let dir = self.path.as_deref().ok_or_else(|| Error::config("data.path", "missing"))?;
                if self.source == DataSource::Mnist {
                    (load_mnist_dir(dir, true)?, load_mnist_dir(dir, false)?, DatasetKind::Digits)
                } else {
                    (load_cifar10_dir(dir, true)?, load_cifar10_dir(dir, false)?, DatasetKind::Natural)
                }
            }
        };
        let train = match self.train_limit {
            Some(n) => train.truncate(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.truncate(n),
            None => test,
        };
        let (train, val) = split(&train, &self.split_spec())?;
        Ok(TrainData { train, val, test, kind })
    }
}

/// Model architecture; input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub fc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let cnn = ModelSpec::smallcnn([1, 1, 1], 2);
        Self {
            kind: ModelKind::Smallcnn,
            hidden: Vec::new(),
            channels: cnn.channels,
            fc_hidden: cnn.fc_hidden,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input: [usize; 3], num_classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            input,
            num_classes,
            hidden: self.hidden.clone(),
            channels: self.channels.clone(),
            fc_hidden: self.fc_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hypergrad: HypergradConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Madao,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            hypergrad: HypergradConfig::default(),
        }
    }
}

impl RunConfig {
    /// The training-loop view of this configuration.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            method: self.method,
            precision: self.precision,
            hypergrad: self.hypergrad.clone(),
            ..self.train.clone()
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train_config().validate()?;
        let probe = match self.data.source {
            DataSource::Cifar10 => self.model.spec([3, 32, 32], 10),
            DataSource::Mnist => self.model.spec([1, 28, 28], 10),
            DataSource::Synth => self.model.spec([1, 16, 16], self.data.synth_classes),
        };
        probe.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }
}

/// Sets the dotted `key` of `table` to `raw`, parsed as a TOML value when
/// possible and as a bare string otherwise.
pub fn set_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.trim().is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{p}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(s, "overrides take the form key=value")),
    }
}

/// Deserializes a merged table, naming the offending key on failure.
pub fn from_table(table: toml::Table) -> Result<RunConfig> {
    serde_path_to_error::deserialize(table).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "config".to_string() } else { path };
        Error::config(key, e.into_inner().to_string())
    })
}

/// Parses the config file at `path`, or an empty table when `None`.
pub fn read_table(path: Option<&Path>) -> Result<toml::Table> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))
        }
        None => Ok(toml::Table::new()),
    }
}

/// Applies `seed_env` if set, then the overrides in order, and validates
/// the result.
pub fn resolve(mut table: toml::Table, overrides: &[(String, String)], seed_env: Option<&str>) -> Result<RunConfig> {
    if let Some(raw) = seed_env {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("expected a non-negative integer, got {raw:?}")))?;
        let seed = i64::try_from(seed).map_err(|_| Error::config(SEED_ENV, "seed exceeds the TOML integer range"))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    for (k, v) in overrides {
        set_override(&mut table, k, v)?;
    }
    let cfg = from_table(table)?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`read_table`] followed by [`resolve`].
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)], seed_env: Option<&str>) -> Result<RunConfig> {
    resolve(read_table(path)?, overrides, seed_env)
}
