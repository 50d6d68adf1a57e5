//! Flat `key = value` configuration files.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::EdgeMode;
use crate::model::{ModelConfig, Task};
use crate::train::TrainConfig;

/// Ordered key/value pairs. Lines are `key = value`; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces, keeping the original position of existing keys.
    pub fn set(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Applies every entry of `other` on top of `self`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }

    fn list_or(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad list `{v}` for `{key}`: {e}"))),
        }
    }

    fn flag_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("on" | "true" | "1" | "yes") => Ok(true),
            Some("off" | "false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("bad flag `{v}` for `{key}` (expected on|off)"))),
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn onoff(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classification),
            "segment" => Ok(Task::Segmentation),
            o => Err(Error::Config(format!("unknown task `{o}` (expected classify|segment)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classify",
            Task::Segmentation => "segment",
        })
    }
}

impl FromStr for EdgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff" => Ok(EdgeMode::Difference),
            "center-diff" => Ok(EdgeMode::CenterDifference),
            o => Err(Error::Config(format!("unknown edge mode `{o}` (expected diff|center-diff)"))),
        }
    }
}

impl std::fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeMode::Difference => "diff",
            EdgeMode::CenterDifference => "center-diff",
        })
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "task",
    "outputs",
    "widths",
    "final_width",
    "head",
    "k",
    "aggregation",
    "attention",
    "residual",
    "combine",
    "edge",
    "transformer",
    "tnet_widths",
    "tnet_head",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "lr",
    "lr_decay",
    "lr_step",
    "lr_floor",
    "bn_momentum",
    "epochs",
    "seed",
    "target_train_acc",
    "augment",
    "point_dropout",
];

pub const DATA_KEYS: &[&str] = &["dataset", "points", "samples_per_class", "test_per_class"];

impl ModelConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("task", &self.task.to_string());
        kv.set("outputs", &self.outputs.to_string());
        kv.set("widths", &list(&self.widths));
        kv.set("final_width", &self.final_width.to_string());
        kv.set("head", &list(&self.head));
        kv.set("k", &self.k.to_string());
        kv.set("aggregation", &self.aggregation.to_string());
        kv.set("attention", onoff(self.attention));
        kv.set("residual", onoff(self.residual));
        kv.set("combine", &self.combine.to_string());
        kv.set("edge", &self.edge_mode.to_string());
        kv.set("transformer", &self.transformer.to_string());
        kv.set("tnet_widths", &list(&self.tnet_widths));
        kv.set("tnet_head", &list(&self.tnet_head));
        kv
    }

    /// Reads model keys, starting from the default classifier or segmenter.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let task: Task = kv.parse_or("task", Task::Classification)?;
        let outputs = kv.parse_or("outputs", 4)?;
        let d = match task {
            Task::Classification => ModelConfig::classifier(outputs),
            Task::Segmentation => ModelConfig::segmenter(outputs),
        };
        let cfg = ModelConfig {
            task,
            outputs,
            widths: kv.list_or("widths", d.widths)?,
            final_width: kv.parse_or("final_width", d.final_width)?,
            head: kv.list_or("head", d.head)?,
            k: kv.parse_or("k", d.k)?,
            aggregation: kv.parse_or("aggregation", d.aggregation)?,
            attention: kv.flag_or("attention", d.attention)?,
            residual: kv.flag_or("residual", d.residual)?,
            combine: kv.parse_or("combine", d.combine)?,
            edge_mode: kv.parse_or("edge", d.edge_mode)?,
            transformer: kv.parse_or("transformer", d.transformer)?,
            tnet_widths: kv.list_or("tnet_widths", d.tnet_widths)?,
            tnet_head: kv.list_or("tnet_head", d.tnet_head)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("batch_size", &self.batch_size.to_string());
        kv.set("lr", &self.lr.to_string());
        kv.set("lr_decay", &self.lr_decay.to_string());
        kv.set("lr_step", &self.lr_step.to_string());
        kv.set("lr_floor", &self.lr_floor.to_string());
        kv.set("bn_momentum", &self.bn_momentum.to_string());
        kv.set("epochs", &self.epochs.to_string());
        kv.set("seed", &self.seed.to_string());
        if let Some(t) = self.target_train_acc {
            kv.set("target_train_acc", &t.to_string());
        }
        kv.set("augment", onoff(self.augment));
        kv.set("point_dropout", &self.point_dropout.to_string());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let target = match kv.get("target_train_acc") {
            None | Some("none") => None,
            Some(_) => Some(kv.parse_or("target_train_acc", 1.0)?),
        };
        let cfg = TrainConfig {
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            lr: kv.parse_or("lr", d.lr)?,
            lr_decay: kv.parse_or("lr_decay", d.lr_decay)?,
            lr_step: kv.parse_or("lr_step", d.lr_step)?,
            lr_floor: kv.parse_or("lr_floor", d.lr_floor)?,
            bn_momentum: kv.parse_or("bn_momentum", d.bn_momentum)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            seed: kv.parse_or("seed", d.seed)?,
            target_train_acc: target,
            augment: kv.flag_or("augment", d.augment)?,
            point_dropout: kv.parse_or("point_dropout", d.point_dropout)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory with `train/` and `test/` subdirectories; synthetic if unset.
    pub dataset: Option<PathBuf>,
    pub points: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            points: 64,
            samples_per_class: 50,
            test_per_class: 20,
        }
    }
}

impl DataConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        if let Some(d) = &self.dataset {
            kv.set("dataset", &d.display().to_string());
        }
        kv.set("points", &self.points.to_string());
        kv.set("samples_per_class", &self.samples_per_class.to_string());
        kv.set("test_per_class", &self.test_per_class.to_string());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = DataConfig::default();
        Ok(DataConfig {
            dataset: kv.get("dataset").filter(|s| !s.is_empty()).map(PathBuf::from),
            points: kv.parse_or("points", d.points)?,
            samples_per_class: kv.parse_or("samples_per_class", d.samples_per_class)?,
            test_per_class: kv.parse_or("test_per_class", d.test_per_class)?,
        })
    }
}

/// Everything a CLI run needs: model, optimisation and data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Rejects unknown keys so that typos do not silently fall back to defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv
            .keys()
            .find(|k| !MODEL_KEYS.contains(k) && !TRAIN_KEYS.contains(k) && !DATA_KEYS.contains(k))
        {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        Ok(Self {
            model: ModelConfig::from_kv(kv)?,
            train: TrainConfig::from_kv(kv)?,
            data: DataConfig::from_kv(kv)?,
        })
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.merge(&self.data.to_kv());
        kv
    }
}
