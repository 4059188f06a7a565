//! Run configuration files (TOML) and the provenance stamp written into outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Format;
use crate::eval::DEFAULT_KS;
use crate::model::ModelConfig;
use crate::pipeline::PrepareConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Raw interaction log.
    pub input: Option<PathBuf>,
    pub format: Format,
    /// Users and items with fewer interactions are dropped.
    pub min_count: usize,
    /// Category label dropout rate applied before shift levels are computed.
    pub label_dropout: f64,
    pub label_dropout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: Format::Tsv,
            min_count: 5,
            label_dropout: 0.0,
            label_dropout_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cut-offs for Recall@k and NDCG@k.
    pub ks: Vec<usize>,
    pub batch_size: usize,
    /// Upper bound on pairs per kind in the distance analysis.
    pub max_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            batch_size: 256,
            max_pairs: 20_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate(&self.model)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.data.label_dropout) {
            return inv(format!("data.label_dropout {} outside [0, 1)", self.data.label_dropout));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return inv("eval.ks must be a non-empty list of positive cut-offs".into());
        }
        if self.eval.batch_size == 0 {
            return inv("eval.batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            min_count: self.data.min_count,
            max_len: self.model.encoder.max_len,
            levels: self.model.levels,
            label_dropout: self.data.label_dropout,
            label_dropout_seed: self.data.label_dropout_seed,
        }
    }

    /// SHA-256 over everything that can influence results. The output section
    /// is left out so the same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            data: &'a DataConfig,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            eval: &'a EvalConfig,
        }
        hash_of(&Hashed {
            data: &self.data,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
        })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.train.seed,
        }
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Identifies the configuration and seed that produced an output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Comment line placed first in CSV outputs.
    pub fn csv_header(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }

    /// Reads back a line produced by [`Provenance::csv_header`].
    pub fn parse_csv_header(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# config_hash=")?;
        let (hash, seed) = rest.split_once(" seed=")?;
        Some(Self {
            config_hash: hash.to_string(),
            seed: seed.trim().parse().ok()?,
        })
    }
}
