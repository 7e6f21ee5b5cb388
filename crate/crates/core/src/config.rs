//! Run configuration: one strict JSON document for every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{CostModel, LatencyTable};
use crate::data::DatasetConfig;
use crate::error::{bail, Error, Result};
use crate::sampler::SamplerConfig;
use crate::search::SearchConfig;
use crate::space::SupernetSpec;
use crate::train::TrainConfig;

/// A named preset or a full supernet description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Preset {
        preset: String,
    },
    Full(SupernetSpec),
}

impl Default for SpecSource {
    fn default() -> Self {
        SpecSource::Preset {
            preset: "desk".into(),
        }
    }
}

impl SpecSource {
    pub fn resolve(&self) -> Result<SupernetSpec> {
        let spec = match self {
            SpecSource::Preset { preset } => SupernetSpec::preset(preset)?,
            SpecSource::Full(s) => s.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub spec: SpecSource,
    /// Supernet training.
    #[serde(default)]
    pub train: TrainConfig,
    /// From-scratch training of a single architecture.
    #[serde(default)]
    pub retrain: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_table: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spec: SpecSource::default(),
            train: TrainConfig::default(),
            retrain: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            search: SearchConfig::default(),
            dataset: DatasetConfig::default(),
            latency_table: None,
            out: default_out(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    /// Reads and validates a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base);
        if let Some(t) = &mut cfg.latency_table {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec.resolve()?;
        self.train.validate()?;
        self.retrain.validate()?;
        self.sampler.validate()?;
        self.search.validate()?;
        self.dataset.validate()?;
        if self.dataset.num_classes() != spec.num_classes {
            bail!(
                InvalidConfig,
                "dataset has {} classes but the supernet predicts {}",
                self.dataset.num_classes(),
                spec.num_classes
            );
        }
        if self.dataset.image_size() != spec.input_size {
            bail!(
                InvalidConfig,
                "dataset images are {}px but the supernet expects {}px",
                self.dataset.image_size(),
                spec.input_size
            );
        }
        if let Some(t) = &self.latency_table {
            if !t.exists() {
                bail!(InvalidConfig, "latency table {} does not exist", t.display());
            }
        }
        Ok(())
    }

    pub fn supernet_spec(&self) -> Result<SupernetSpec> {
        self.spec.resolve()
    }

    /// Cost model of the configured space, with latency when a table is set.
    pub fn cost_model(&self) -> Result<CostModel> {
        let model = CostModel::new(&self.supernet_spec()?)?;
        match &self.latency_table {
            Some(p) => model.with_latency(LatencyTable::load(p)?),
            None => Ok(model),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form without the output directory, hex
    /// encoded.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out");
        }
        let text = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}
