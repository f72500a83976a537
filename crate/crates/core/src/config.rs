//! Run configuration: a flat `key = value` text file. `#` starts a comment;
//! blank lines are ignored; every key may appear once. Relative paths are
//! resolved against the config file's directory. See `docs/formats.md` for
//! the full key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::integration::IntegrationTarget;
use crate::model::{ArchSpec, LayerSpec};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
    /// Gaussian blobs; every fifth item goes to the test split.
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Use only the first `n` training / test items.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl DataConfig {
    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                data::load_idx(train_images, train_labels)?,
                data::load_idx(test_images, test_labels)?,
            ),
            DataSource::Cifar { train, test } => (data::load_cifar_binary(train)?, data::load_cifar_binary(test)?),
            DataSource::Blobs {
                classes,
                per_class,
                dim,
                seed,
            } => {
                let all = data::synthetic_blobs(*classes, *per_class, *dim, *seed)?;
                let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 5 == 4);
                if test_idx.is_empty() {
                    return Err(Error::invalid("blobs too small to hold out a test split"));
                }
                (all.subset(&train_idx)?, all.subset(&test_idx)?)
            }
        };
        let train = match self.train_limit {
            Some(n) => train.head(n)?,
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.head(n)?,
            None => test,
        };
        Ok((train, test))
    }
}

/// Settings of the one-shot versus iterative score-only pruning study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Iterative schedule; the first entry is the shared starting capacity.
    pub ip_schedule: Vec<f64>,
    /// Epochs of score training per capacity (one-shot) or per stage
    /// (iterative).
    pub stage_epochs: usize,
    pub seeds: Vec<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            ip_schedule: vec![0.5, 0.4, 0.3, 0.2, 0.1],
            stage_epochs: 1,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub batch_norm: bool,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: vec![LayerSpec::Linear { out: 256 }, LayerSpec::Linear { out: 128 }],
            batch_norm: true,
            embedding_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn arch_for(&self, data: &Dataset) -> Result<ArchSpec> {
        let arch = ArchSpec {
            input: data.item_shape(),
            layers: self.layers.clone(),
            batch_norm: self.batch_norm,
            embedding_dim: self.embedding_dim,
            num_classes: data.classes(),
        };
        arch.layer_shapes()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub study: StudyConfig,
    /// The text this config was parsed from.
    pub text: String,
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Entries {
    map: BTreeMap<String, Entry>,
    base: PathBuf,
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.get_mut(key).map(|e| {
            e.used = true;
            (e.line, e.value.clone())
        })
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| config_err(line, format!("{key}: cannot parse {v:?}: {e}"))),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse::<T>()
                        .map_err(|e| config_err(line, format!("{key}: cannot parse {item:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(|(_, v)| self.base.join(v))
    }

    fn required_path(&mut self, key: &str, source_line: usize) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| config_err(source_line, format!("this dataset needs `{key}`")))
    }

    fn paths(&mut self, key: &str) -> Vec<PathBuf> {
        self.take(key)
            .map(|(_, v)| v.split(',').map(|p| self.base.join(p.trim())).collect())
            .unwrap_or_default()
    }

    fn line_of(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |e| e.line)
    }
}

fn parse_layer(spec: &str, line: usize) -> Result<LayerSpec> {
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| config_err(line, format!("bad number {s:?} in layer {spec:?}")))
    };
    match parts.as_slice() {
        ["linear", out] => Ok(LayerSpec::Linear { out: num(out)? }),
        ["conv", c, k, s, p] => Ok(LayerSpec::Conv {
            out_channels: num(c)?,
            kernel: num(k)?,
            stride: num(s)?,
            padding: num(p)?,
        }),
        _ => Err(config_err(
            line,
            format!("layer {spec:?} is neither linear:OUT nor conv:OUT:KERNEL:STRIDE:PADDING"),
        )),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("expected `key = value`, got {content:?}")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(config_err(line, "empty key"));
            }
            if let Some(prev) = map.get(&key) {
                let prev: &Entry = prev;
                return Err(config_err(line, format!("`{key}` already set on line {}", prev.line)));
            }
            map.insert(
                key,
                Entry {
                    line,
                    value: value.trim().to_string(),
                    used: false,
                },
            );
        }
        let mut e = Entries {
            map,
            base: base.to_path_buf(),
        };

        let mut model = ModelConfig::default();
        if let Some((line, v)) = e.take("layers") {
            model.layers = v.split(',').map(|s| parse_layer(s, line)).collect::<Result<_>>()?;
        }
        if let Some(v) = e.parsed("batch_norm")? {
            model.batch_norm = v;
        }
        if let Some(v) = e.parsed("embedding_dim")? {
            model.embedding_dim = v;
        }

        let mut train = TrainConfig::default();
        if let Some(v) = e.list("capacities")? {
            train.capacities = v;
        }
        macro_rules! set {
            ($key:literal => $field:expr) => {
                if let Some(v) = e.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("include_dense" => train.include_dense);
        set!("eta" => train.learning_rate);
        set!("alpha" => train.integration.alpha);
        set!("epochs" => train.epochs);
        set!("batch" => train.batch_size);
        set!("seed" => train.seed);
        set!("momentum" => train.momentum);
        set!("weight_decay" => train.weight_decay);
        set!("filter_scores" => train.filter_scores);
        set!("calibration_fraction" => train.calibration_fraction);
        if let Some((line, v)) = e.take("mode") {
            train.mode = v.parse::<TrainMode>().map_err(|err| config_err(line, err.to_string()))?;
        }
        if let Some((line, v)) = e.take("integration") {
            match v.as_str() {
                "original" => train.integration.target = IntegrationTarget::Original,
                "projected" => train.integration.target = IntegrationTarget::Projected,
                "sum" => train.conflict_aware = false,
                other => {
                    return Err(config_err(
                        line,
                        format!("integration {other:?} is not original, projected or sum"),
                    ))
                }
            }
        }
        let train_line = ["capacities", "eta", "alpha", "batch", "momentum", "calibration_fraction"]
            .iter()
            .map(|k| e.line_of(k))
            .max()
            .unwrap_or(0);
        train.validate().map_err(|err| config_err(train_line, err.to_string()))?;

        let dataset_line = e.line_of("dataset");
        let kind = e.take("dataset").map(|(_, v)| v).unwrap_or_else(|| "idx".into());
        let source = match kind.as_str() {
            "idx" => DataSource::Idx {
                train_images: e.required_path("train_images", dataset_line)?,
                train_labels: e.required_path("train_labels", dataset_line)?,
                test_images: e.required_path("test_images", dataset_line)?,
                test_labels: e.required_path("test_labels", dataset_line)?,
            },
            "cifar" => {
                let train = e.paths("cifar_train");
                let test = e.paths("cifar_test");
                if train.is_empty() || test.is_empty() {
                    return Err(config_err(dataset_line, "cifar needs `cifar_train` and `cifar_test`"));
                }
                DataSource::Cifar { train, test }
            }
            "blobs" => DataSource::Blobs {
                classes: e.parsed("blobs_classes")?.unwrap_or(4),
                per_class: e.parsed("blobs_per_class")?.unwrap_or(50),
                dim: e.parsed("blobs_dim")?.unwrap_or(16),
                seed: e.parsed("blobs_seed")?.unwrap_or(0),
            },
            other => {
                return Err(config_err(
                    dataset_line,
                    format!("dataset {other:?} is not idx, cifar or blobs"),
                ))
            }
        };
        let data = DataConfig {
            source,
            train_limit: e.parsed("train_limit")?,
            test_limit: e.parsed("test_limit")?,
        };

        let mut study = StudyConfig::default();
        if let Some(v) = e.list("ip_schedule")? {
            study.ip_schedule = v;
        }
        set!("stage_epochs" => study.stage_epochs);
        if let Some(v) = e.list("study_seeds")? {
            study.seeds = v;
        }
        let line = e.line_of("ip_schedule");
        if study.ip_schedule.is_empty()
            || study.ip_schedule.windows(2).any(|w| w[1] >= w[0])
            || study.ip_schedule.iter().any(|&c| !(c > 0.0 && c <= 1.0))
        {
            return Err(config_err(line, "ip_schedule must be strictly decreasing capacities in (0, 1]"));
        }

        if let Some((key, entry)) = e.map.iter().find(|(_, v)| !v.used) {
            return Err(config_err(entry.line, format!("unknown key `{key}`")));
        }
        Ok(Self {
            model,
            train,
            data,
            study,
            text: text.to_string(),
        })
    }
}
