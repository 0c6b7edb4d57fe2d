//! Run configuration files (YAML).
//!
//! Model fields sit at the top level under their usual names
//! (`num_levels`, `kernel_size`, `hidden_channels`, ...). Three optional
//! sections add the rest:
//!
//! ```yaml
//! num_levels: 2
//! kernel_size: 5
//! hidden_channels: [16, 32, 48]
//! train:
//!   learning_rate: 0.001
//!   epochs: 100
//! data:
//!   train: data/train
//!   test: data/test
//! output_dir: runs/default
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::unet::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory used for training; its statistics normalize
    /// every other split.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

const SECTIONS: [&str; 3] = ["train", "data", "output_dir"];

/// Map a serde error onto the field it names, falling back to `section`.
fn field_error(section: &str, err: impl std::fmt::Display) -> Error {
    let msg = err.to_string();
    let named = ["unknown field `", "missing field `", "duplicate field `"]
        .iter()
        .find_map(|pat| msg.split_once(pat).and_then(|(_, rest)| rest.split_once('`')).map(|(f, _)| f.to_string()));
    let field = match (named, section) {
        (Some(f), "") => f,
        (Some(f), s) => format!("{}.{}", s, f),
        (None, "") => "<model>".to_string(),
        (None, s) => s.to_string(),
    };
    Error::config(field, msg)
}

impl RunConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let root: Value = serde_yaml::from_str(text).map_err(|e| field_error("", e))?;
        let mut map = match root {
            Value::Mapping(m) => m,
            Value::Null => Mapping::new(),
            _ => return Err(Error::config("<root>", "expected a mapping")),
        };
        let mut take = |key: &str| map.remove(Value::String(key.to_string()));
        let train: TrainConfig = match take("train") {
            Some(v) => serde_yaml::from_value(v).map_err(|e| field_error("train", e))?,
            None => TrainConfig::default(),
        };
        let data: DataConfig = match take("data") {
            Some(v) => serde_yaml::from_value(v).map_err(|e| field_error("data", e))?,
            None => DataConfig::default(),
        };
        let output_dir = match take("output_dir") {
            Some(Value::String(s)) => PathBuf::from(s),
            Some(_) => return Err(Error::config("output_dir", "expected a path string")),
            None => RunConfig::default().output_dir,
        };
        let model: ModelConfig = serde_yaml::from_value(Value::Mapping(map)).map_err(|e| field_error("", e))?;
        model.validate()?;
        train.validate()?;
        Ok(Self {
            model,
            train,
            data,
            output_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        let mut map = match serde_yaml::to_value(&self.model).map_err(|e| field_error("", e))? {
            Value::Mapping(m) => m,
            _ => unreachable!("model config serializes to a mapping"),
        };
        let values = [
            serde_yaml::to_value(&self.train).map_err(|e| field_error("train", e))?,
            serde_yaml::to_value(&self.data).map_err(|e| field_error("data", e))?,
            Value::String(self.output_dir.to_string_lossy().into_owned()),
        ];
        for (k, v) in SECTIONS.iter().zip(values) {
            map.insert(Value::String(k.to_string()), v);
        }
        serde_yaml::to_string(&Value::Mapping(map)).map_err(|e| field_error("", e))
    }

    /// One seed for everything random in a run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Resolve relative dataset paths against the config file's directory.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.test);
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        self
    }
}
