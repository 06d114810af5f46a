//! Experiment configuration.
//!
//! A config is a TOML file whose tables are the dotted sections `data`,
//! `model`, `train` and `scheduler`. Internally everything is flattened to
//! `section.key` paths so that the three layers (built-in defaults, an
//! optional preset, the file itself) and CLI overrides merge key by key,
//! with the origin of every value kept for logging.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use divebatch_core::data::{NoiseConvention, SplitSpec, SyntheticSpec};
use divebatch_core::models::{Activation, ModelFamily};
use divebatch_core::optim::{SchedulerKind, TrainConfig};
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Syntax { path: PathBuf, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: expected {expected}, got {got}")]
    Type {
        key: String,
        expected: &'static str,
        got: String,
    },
    #[error("key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown preset `{0}` (see `divebatch presets`)")]
    UnknownPreset(String),
    #[error("preset `{0}` is documentation only and cannot be run")]
    DocumentationOnly(String),
}

/// Where a configuration value came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Default,
    Preset(String),
    File(PathBuf),
    CommandLine,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::Preset(p) => write!(f, "preset {p}"),
            Origin::File(p) => write!(f, "file {}", p.display()),
            Origin::CommandLine => write!(f, "command line"),
        }
    }
}

/// Every accepted key with its default. `None` marks keys without a default.
const KEYS: &[(&str, Option<Lit>)] = &[
    ("name", None),
    ("preset", None),
    ("trials", Some(Lit::Int(1))),
    ("output_dir", None),
    ("data.source", Some(Lit::Str("synthetic"))),
    ("data.n", Some(Lit::Int(20_000))),
    ("data.d", Some(Lit::Int(512))),
    ("data.noise", Some(Lit::Float(0.1))),
    ("data.noise_convention", Some(Lit::Str("variance"))),
    ("data.split", Some(Lit::Float(0.8))),
    ("data.seed", Some(Lit::Int(0))),
    ("data.path", None),
    ("data.label_column", Some(Lit::Str("label"))),
    ("data.use_split_file", Some(Lit::Bool(false))),
    ("model.family", Some(Lit::Str("logistic"))),
    ("model.hidden", Some(Lit::Int(16))),
    ("model.activation", Some(Lit::Str("relu"))),
    ("train.lr", Some(Lit::Float(0.1))),
    ("train.batch", Some(Lit::Int(128))),
    ("train.max_batch", Some(Lit::Int(4096))),
    ("train.epochs", Some(Lit::Int(100))),
    ("train.lr_decay", Some(Lit::Float(0.75))),
    ("train.lr_decay_period", Some(Lit::Int(20))),
    ("train.rescale_lr", Some(Lit::Bool(true))),
    ("train.seed", Some(Lit::Int(0))),
    ("train.deterministic", Some(Lit::Bool(true))),
    ("train.compute_exact", Some(Lit::Bool(false))),
    ("scheduler.kind", Some(Lit::Str("divebatch"))),
    ("scheduler.delta", Some(Lit::Float(1.0))),
    ("scheduler.resize_freq", Some(Lit::Int(1))),
    ("scheduler.resize_factor", Some(Lit::Int(2))),
    ("scheduler.monotone", Some(Lit::Bool(false))),
];

#[derive(Debug, Clone, Copy)]
enum Lit {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(&'static str),
}

impl Lit {
    fn value(self) -> Value {
        match self {
            Lit::Int(v) => Value::Integer(v),
            Lit::Float(v) => Value::Float(v),
            Lit::Bool(v) => Value::Boolean(v),
            Lit::Str(v) => Value::String(v.into()),
        }
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Flattened key/value layers with the origin of each value.
#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<String, (Value, Origin)>,
}

impl RawConfig {
    pub fn defaults() -> Self {
        let values = KEYS
            .iter()
            .filter_map(|(k, d)| d.map(|d| (k.to_string(), (d.value(), Origin::Default))))
            .collect();
        Self { values }
    }

    /// Overlays `entries`, rejecting unknown keys.
    pub fn set_all(
        &mut self,
        entries: impl IntoIterator<Item = (String, Value)>,
        origin: &Origin,
    ) -> Result<(), ConfigError> {
        for (k, v) in entries {
            if !is_known(&k) {
                return Err(ConfigError::UnknownKey(k));
            }
            self.values.insert(k, (v, origin.clone()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value, origin: Origin) -> Result<(), ConfigError> {
        self.set_all([(key.to_string(), value)], &origin)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key).map(|(v, _)| v)
    }

    pub fn origin(&self, key: &str) -> Option<&Origin> {
        self.values.get(key).map(|(_, o)| o)
    }

    /// `key = value  (origin)` lines in key order.
    pub fn provenance(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|(k, (v, o))| format!("{k} = {v}  ({o})"))
            .collect()
    }

    fn int(&self, key: &str) -> Result<i64, ConfigError> {
        match self.require(key)? {
            Value::Integer(i) => Ok(*i),
            other => Err(type_err(key, "an integer", other)),
        }
    }

    fn count(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.int(key)?;
        usize::try_from(v).map_err(|_| invalid_key(key, format!("must be nonnegative, got {v}")))
    }

    fn seed(&self, key: &str) -> Result<u64, ConfigError> {
        let v = self.int(key)?;
        u64::try_from(v).map_err(|_| invalid_key(key, format!("must be nonnegative, got {v}")))
    }

    fn float(&self, key: &str) -> Result<f64, ConfigError> {
        match self.require(key)? {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(type_err(key, "a number", other)),
        }
    }

    fn boolean(&self, key: &str) -> Result<bool, ConfigError> {
        match self.require(key)? {
            Value::Boolean(b) => Ok(*b),
            other => Err(type_err(key, "a boolean", other)),
        }
    }

    fn string(&self, key: &str) -> Result<&str, ConfigError> {
        match self.require(key)? {
            Value::String(s) => Ok(s),
            other => Err(type_err(key, "a string", other)),
        }
    }

    fn opt_string(&self, key: &str) -> Result<Option<&str>, ConfigError> {
        if self.get(key).is_none() {
            return Ok(None);
        }
        self.string(key).map(Some)
    }

    fn require(&self, key: &str) -> Result<&Value, ConfigError> {
        self.get(key)
            .ok_or_else(|| invalid_key(key, "required but not set"))
    }
}

fn type_err(key: &str, expected: &'static str, got: &Value) -> ConfigError {
    ConfigError::Type {
        key: key.into(),
        expected,
        got: format!("{} `{got}`", got.type_str()),
    }
}

fn invalid_key(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Flattens a parsed TOML document into dotted keys, in document order.
fn flatten(table: &toml::Table, prefix: &str, out: &mut Vec<(String, Value)>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(t, &key, out)?,
            other => {
                if !is_known(&key) {
                    return Err(ConfigError::UnknownKey(key));
                }
                out.push((key, other.clone()));
            }
        }
    }
    Ok(())
}

pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<(String, Value)>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
        path: path.to_path_buf(),
        reason: e.message().to_string(),
    })?;
    let mut out = Vec::new();
    flatten(&table, "", &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        label_column: String,
        split: SplitSpec,
    },
}

impl DataSource {
    /// Seed that fixes the dataset and its split; compared configs must
    /// share it.
    pub fn seed(&self) -> Option<u64> {
        match self {
            DataSource::Synthetic(s) => Some(s.seed),
            DataSource::Csv {
                split: SplitSpec::Random { seed, .. },
                ..
            } => Some(*seed),
            DataSource::Csv { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub model: ModelFamily,
    pub train: TrainConfig,
    pub scheduler: SchedulerKind,
    pub trials: usize,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let data = match raw.string("data.source")? {
            "synthetic" => {
                let convention = match raw.string("data.noise_convention")? {
                    "variance" => NoiseConvention::Variance,
                    "stddev" | "std" => NoiseConvention::StdDev,
                    other => {
                        return Err(invalid_key(
                            "data.noise_convention",
                            format!("expected `variance` or `stddev`, got `{other}`"),
                        ))
                    }
                };
                let spec = SyntheticSpec {
                    n: raw.count("data.n")?,
                    d: raw.count("data.d")?,
                    noise_scale: raw.float("data.noise")?,
                    noise_convention: convention,
                    split_fraction: raw.float("data.split")?,
                    seed: raw.seed("data.seed")?,
                };
                spec.validate()
                    .map_err(|e| invalid_key("data", e.to_string()))?;
                DataSource::Synthetic(spec)
            }
            "csv" => {
                let path = raw
                    .opt_string("data.path")?
                    .ok_or_else(|| invalid_key("data.path", "required when data.source = \"csv\""))?;
                let split = if raw.boolean("data.use_split_file")? {
                    SplitSpec::Sidecar
                } else {
                    let fraction = raw.float("data.split")?;
                    if !(fraction > 0.0 && fraction <= 1.0) {
                        return Err(invalid_key("data.split", format!("must lie in (0, 1], got {fraction}")));
                    }
                    SplitSpec::Random {
                        fraction,
                        seed: raw.seed("data.seed")?,
                    }
                };
                DataSource::Csv {
                    path: PathBuf::from(path),
                    label_column: raw.string("data.label_column")?.to_string(),
                    split,
                }
            }
            other => {
                return Err(invalid_key(
                    "data.source",
                    format!("expected `synthetic` or `csv`, got `{other}`"),
                ))
            }
        };

        let model = match raw.string("model.family")? {
            "logistic" => ModelFamily::Logistic,
            "quadratic" => ModelFamily::Quadratic,
            "mlp" => {
                let hidden = raw.count("model.hidden")?;
                if hidden == 0 {
                    return Err(invalid_key("model.hidden", "must be positive"));
                }
                let name = raw.string("model.activation")?;
                let activation = Activation::parse(name).ok_or_else(|| {
                    invalid_key("model.activation", format!("expected `relu` or `tanh`, got `{name}`"))
                })?;
                ModelFamily::Mlp { hidden, activation }
            }
            other => {
                return Err(invalid_key(
                    "model.family",
                    format!("expected `logistic`, `mlp` or `quadratic`, got `{other}`"),
                ))
            }
        };

        let train = TrainConfig {
            initial_lr: raw.float("train.lr")?,
            initial_batch: raw.count("train.batch")?,
            max_batch: raw.count("train.max_batch")?,
            epochs: raw.count("train.epochs")?,
            lr_decay_factor: raw.float("train.lr_decay")?,
            lr_decay_period: raw.count("train.lr_decay_period")?,
            rescale_lr: raw.boolean("train.rescale_lr")?,
            seed: raw.seed("train.seed")?,
            deterministic: raw.boolean("train.deterministic")?,
            compute_exact: raw.boolean("train.compute_exact")?,
        };

        let resize_freq = raw.count("scheduler.resize_freq")?;
        let delta = raw.float("scheduler.delta")?;
        let monotone = raw.boolean("scheduler.monotone")?;
        let scheduler = match raw.string("scheduler.kind")? {
            "fixed" | "sgd" => SchedulerKind::Fixed,
            "adabatch" => SchedulerKind::AdaBatch {
                resize_factor: raw.count("scheduler.resize_factor")?,
                resize_freq,
            },
            "divebatch" => SchedulerKind::DiveBatch {
                delta,
                resize_freq,
                monotone,
            },
            "oracle" => SchedulerKind::Oracle {
                delta,
                resize_freq,
                monotone,
            },
            other => {
                return Err(invalid_key(
                    "scheduler.kind",
                    format!("expected `fixed`, `adabatch`, `divebatch` or `oracle`, got `{other}`"),
                ))
            }
        };
        scheduler
            .validate()
            .map_err(|e| invalid_key("scheduler", e.to_string()))?;

        let trials = raw.count("trials")?;
        if trials == 0 {
            return Err(invalid_key("trials", "must be at least 1"));
        }
        let name = match raw.opt_string("name")? {
            Some(n) => n.to_string(),
            None => match raw.opt_string("preset")? {
                Some(p) => p.to_string(),
                None => scheduler.name().to_string(),
            },
        };
        Ok(Self {
            name,
            data,
            model,
            train,
            scheduler,
            trials,
            output_dir: raw.opt_string("output_dir")?.map(PathBuf::from),
        })
    }
}

/// Command-line overrides applied on top of file and preset.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub trials: Option<usize>,
    pub deterministic: bool,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
}

/// Builds a config from an optional file and an optional preset. A preset
/// named on the command line wins over one named inside the file; keys in
/// the file override the preset.
pub fn load_config(
    path: Option<&Path>,
    preset: Option<&str>,
    overrides: &Overrides,
) -> Result<(ExperimentConfig, RawConfig), ConfigError> {
    let file_entries = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Some((parse_entries(&text, p)?, p.to_path_buf()))
        }
        None => None,
    };
    let preset_name = preset.map(str::to_string).or_else(|| {
        file_entries.as_ref().and_then(|(entries, _)| {
            entries.iter().find_map(|(k, v)| match (k.as_str(), v) {
                ("preset", Value::String(s)) => Some(s.clone()),
                _ => None,
            })
        })
    });

    let mut raw = RawConfig::defaults();
    if let Some(name) = &preset_name {
        let p = find_preset(name)?;
        if p.documentation_only {
            return Err(ConfigError::DocumentationOnly(name.clone()));
        }
        raw.set_all(p.entries(), &Origin::Preset(name.clone()))?;
        raw.set("preset", Value::String(name.clone()), Origin::Preset(name.clone()))?;
    }
    if let Some((entries, p)) = file_entries {
        raw.set_all(entries, &Origin::File(p))?;
    }
    if let Some(t) = overrides.trials {
        raw.set("trials", Value::Integer(t as i64), Origin::CommandLine)?;
    }
    if let Some(e) = overrides.epochs {
        raw.set("train.epochs", Value::Integer(e as i64), Origin::CommandLine)?;
    }
    if overrides.deterministic {
        raw.set("train.deterministic", Value::Boolean(true), Origin::CommandLine)?;
    }
    if let Some(o) = &overrides.output_dir {
        raw.set("output_dir", Value::String(o.display().to_string()), Origin::CommandLine)?;
    }
    let cfg = ExperimentConfig::from_raw(&raw)?;
    for line in raw.provenance() {
        log::info!("config: {line}");
    }
    Ok((cfg, raw))
}

/// A named parameter set.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    /// Parameters of experiments this crate cannot run (image models).
    pub documentation_only: bool,
    entries: &'static [(&'static str, Lit)],
}

impl Preset {
    pub fn entries(&self) -> Vec<(String, Value)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.value()))
            .collect()
    }
}

use Lit::{Bool as B, Float as F, Int as I, Str as S};

const SYNTHETIC_DATA: [(&str, Lit); 5] = [
    ("data.source", S("synthetic")),
    ("data.n", I(20_000)),
    ("data.d", I(512)),
    ("data.noise", F(0.1)),
    ("data.split", F(0.8)),
];

macro_rules! preset {
    ($name:literal, $desc:literal, doc, [$($k:literal => $v:expr),* $(,)?]) => {
        Preset { name: $name, description: $desc, documentation_only: true, entries: &[$(($k, $v)),*] }
    };
    ($name:literal, $desc:literal, [$($k:literal => $v:expr),* $(,)?]) => {
        Preset {
            name: $name,
            description: $desc,
            documentation_only: false,
            entries: &[
                SYNTHETIC_DATA[0], SYNTHETIC_DATA[1], SYNTHETIC_DATA[2], SYNTHETIC_DATA[3], SYNTHETIC_DATA[4],
                ("train.epochs", I(100)),
                ("train.lr_decay", F(0.75)),
                ("train.lr_decay_period", I(20)),
                ("train.rescale_lr", B(true)),
                ("trials", I(10)),
                $(($k, $v)),*
            ],
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!("synthetic-convex", "logistic regression, DiveBatch", [
        "model.family" => S("logistic"),
        "scheduler.kind" => S("divebatch"), "scheduler.delta" => F(1.0),
        "train.lr" => F(16.0), "train.batch" => I(128), "train.max_batch" => I(4096),
    ]),
    preset!("synthetic-convex-oracle", "logistic regression, exact-diversity oracle", [
        "model.family" => S("logistic"),
        "scheduler.kind" => S("oracle"), "scheduler.delta" => F(1.0),
        "train.lr" => F(16.0), "train.batch" => I(128), "train.max_batch" => I(4096),
    ]),
    preset!("synthetic-convex-sgd128", "logistic regression, SGD with batch 128", [
        "model.family" => S("logistic"),
        "scheduler.kind" => S("fixed"),
        "train.lr" => F(16.0), "train.batch" => I(128), "train.max_batch" => I(256),
    ]),
    preset!("synthetic-convex-sgd4096", "logistic regression, SGD with batch 4096", [
        "model.family" => S("logistic"),
        "scheduler.kind" => S("fixed"),
        "train.lr" => F(512.0), "train.batch" => I(4096), "train.max_batch" => I(4096),
    ]),
    preset!("synthetic-nonconvex", "one-hidden-layer MLP, DiveBatch", [
        "model.family" => S("mlp"), "model.hidden" => I(16), "model.activation" => S("relu"),
        "scheduler.kind" => S("divebatch"), "scheduler.delta" => F(0.1),
        "train.lr" => F(1.0), "train.batch" => I(512), "train.max_batch" => I(8192),
    ]),
    preset!("synthetic-nonconvex-oracle", "one-hidden-layer MLP, exact-diversity oracle", [
        "model.family" => S("mlp"), "model.hidden" => I(16), "model.activation" => S("relu"),
        "scheduler.kind" => S("oracle"), "scheduler.delta" => F(0.1),
        "train.lr" => F(1.0), "train.batch" => I(512), "train.max_batch" => I(8192),
    ]),
    preset!("synthetic-nonconvex-sgd512", "one-hidden-layer MLP, SGD with batch 512", [
        "model.family" => S("mlp"), "model.hidden" => I(16), "model.activation" => S("relu"),
        "scheduler.kind" => S("fixed"),
        "train.lr" => F(1.0), "train.batch" => I(512), "train.max_batch" => I(512),
    ]),
    preset!("synthetic-nonconvex-sgd5028", "one-hidden-layer MLP, SGD with batch 5028", [
        "model.family" => S("mlp"), "model.hidden" => I(16), "model.activation" => S("relu"),
        "scheduler.kind" => S("fixed"),
        "train.lr" => F(9.83), "train.batch" => I(5028), "train.max_batch" => I(5028),
    ]),
    preset!("cifar10", "ResNet-20 on CIFAR-10 (DiveBatch column; AdaBatch shares lr, batches and frequency)", doc, [
        "train.lr" => F(0.1), "train.batch" => I(128), "train.max_batch" => I(2048),
        "scheduler.kind" => S("divebatch"), "scheduler.delta" => F(0.1),
        "scheduler.resize_freq" => I(20), "scheduler.resize_factor" => I(2),
    ]),
    preset!("cifar100", "ResNet-20 on CIFAR-100 (DiveBatch column; AdaBatch shares lr, batches and frequency)", doc, [
        "train.lr" => F(0.1), "train.batch" => I(128), "train.max_batch" => I(2048),
        "scheduler.kind" => S("divebatch"), "scheduler.delta" => F(0.01),
        "scheduler.resize_freq" => I(20), "scheduler.resize_factor" => I(2),
    ]),
    preset!("tiny-imagenet", "ResNet on Tiny-ImageNet (DiveBatch column; AdaBatch shares lr, batches and frequency)", doc, [
        "train.lr" => F(0.01), "train.batch" => I(256), "train.max_batch" => I(2048),
        "scheduler.kind" => S("divebatch"), "scheduler.delta" => F(0.01),
        "scheduler.resize_freq" => I(20), "scheduler.resize_factor" => I(2),
    ]),
];

pub fn list_presets() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn find_preset(name: &str) -> Result<&'static Preset, ConfigError> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}
