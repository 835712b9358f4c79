//! Run configuration: one TOML document with `[data]`, `[model]`, `[train]`,
//! `[output]`, `[eval]`, `[predict]` and `[verify]` tables.
//!
//! Unspecified model channels, dropout and batch size are filled in from the
//! dataset once it is loaded (see [`RunConfig::resolve_for_data`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitRule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::verify::VerifyConfig;

pub const SEED_ENV: &str = "TM_SEED";

/// Dropout used for the ETT datasets when none is configured.
pub const ETT_DROPOUT: f64 = 0.7;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_BATCH: usize = 32;
/// Batch size for the large ratio-split datasets.
pub const RATIO_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetClass {
    Etth,
    Ettm,
    #[default]
    Ratio,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub class: DatasetClass,
    /// End indices of the train, validation and test targets; overrides `class`.
    pub borders: Option<[usize; 3]>,
}

impl DataSection {
    pub fn split_rule(&self) -> SplitRule {
        match (self.borders, self.class) {
            (Some(b), _) => SplitRule::Borders(b),
            (None, DatasetClass::Etth) => SplitRule::Etth,
            (None, DatasetClass::Ettm) => SplitRule::Ettm,
            (None, DatasetClass::Ratio) => SplitRule::Ratio,
        }
    }

    pub fn require_path(&self) -> Result<&Path> {
        self.path
            .as_deref()
            .ok_or_else(|| Error::Config("data.path is required for this command".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("tm_run"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to `<output.dir>/checkpoint.tmck`.
    pub checkpoint: Option<PathBuf>,
    /// Also report the repeat-last-value baseline.
    pub persistence: bool,
    /// `val` or `test`.
    pub split: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub checkpoint: Option<PathBuf>,
    /// Index into the test windows.
    pub window: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides both `model.seed` and `train.seed` when set.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputSection,
    pub eval: EvalSection,
    pub predict: PredictSection,
    pub verify: VerifyConfig,
}

/// A parsed configuration with a record of which data-dependent keys were set.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// The file as read, before overrides.
    pub source: String,
    explicit_channels: bool,
    explicit_dropout: bool,
    explicit_batch: bool,
}

impl LoadedConfig {
    pub fn parse(source: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut doc: toml::Table = source
            .parse()
            .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = env_seed {
            let seed: i64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
            doc.insert("seed".into(), toml::Value::Integer(seed));
        }
        let has = |table: &str, key: &str| {
            doc.get(table)
                .and_then(|t| t.as_table())
                .is_some_and(|t| t.contains_key(key))
        };
        let explicit_channels = has("model", "channels");
        let explicit_dropout = has("model", "dropout");
        let explicit_batch = has("train", "batch_size");
        let mut config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(seed) = config.seed {
            config.model.seed = seed;
            config.train.seed = seed;
        }
        config.train.validate()?;
        Ok(LoadedConfig {
            config,
            source: source.to_string(),
            explicit_channels,
            explicit_dropout,
            explicit_batch,
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::parse(&source, overrides, env.as_deref())
    }

    /// Fills data-dependent defaults and validates the result against `channels`.
    pub fn resolve_for_data(&mut self, channels: usize) -> Result<()> {
        let c = &mut self.config;
        if self.explicit_channels {
            if c.model.channels != channels {
                return Err(Error::Config(format!(
                    "model.channels = {} but the dataset has {channels} channels",
                    c.model.channels
                )));
            }
        } else {
            c.model.channels = channels;
        }
        if !self.explicit_dropout {
            c.model.dropout = match c.data.class {
                DatasetClass::Etth | DatasetClass::Ettm => ETT_DROPOUT,
                DatasetClass::Ratio => DEFAULT_DROPOUT,
            };
        }
        if !self.explicit_batch {
            c.train.batch_size = match c.data.class {
                DatasetClass::Ratio => RATIO_BATCH,
                _ => DEFAULT_BATCH,
            };
        }
        log::info!(
            "channels {}, dropout {}, batch size {}",
            c.model.channels,
            c.model.dropout,
            c.train.batch_size
        );
        c.model.validate()?;
        c.train.validate()
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.dir.join("checkpoint.tmck")
    }
}

/// Applies `a.b.c=value`; the value is read as TOML, falling back to a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
