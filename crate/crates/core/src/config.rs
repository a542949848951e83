//! Run configuration: one strict JSON document for every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::benchmark::BenchmarkConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub benchmark: BenchmarkConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.benchmark.validate()?;
        self.data.validate()?;
        if self.data.train_counts.len() != self.model.num_classes {
            return Err(Error::InvalidConfig(format!(
                "data.train_counts has {} entries for {} classes",
                self.data.train_counts.len(),
                self.model.num_classes
            )));
        }
        if self.data.patch > self.model.input_hw {
            return Err(Error::InvalidConfig(format!("patch {} exceeds input {}", self.data.patch, self.model.input_hw)));
        }
        if self.model.in_channels != 3 {
            return Err(Error::InvalidConfig("the synthetic data is RGB; model.in_channels must be 3".into()));
        }
        Ok(())
    }

    /// Apply one seed to training, adaptation and the benchmark.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.adapt.seed = seed;
        self.benchmark.master_seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"adapt": {"stepz": 3}}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::from_json(r#"{"extra": 1}"#), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn cross_section_checks() {
        let bad = r#"{"model": {"num_classes": 4}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }
}
