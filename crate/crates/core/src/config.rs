//! Run configuration: one TOML file with `[train]`, `[scheduler]`, `[model]` and
//! `[phantom]` tables, layered over the desk-scale defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::{DatasetSpec, PhantomSpec};
use crate::sampler::SchedulerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub model: ModelConfig,
    pub phantom: DatasetSpec,
}

impl Default for RunConfig {
    /// Toy model and training settings on 20 phantoms (two of them negative).
    fn default() -> Self {
        Self {
            train: TrainConfig::toy(),
            scheduler: SchedulerConfig::default(),
            model: ModelConfig::toy(),
            phantom: DatasetSpec { n_patients: 20, n_negative: 2, template: PhantomSpec::default(), seed: 0 },
        }
    }
}

impl RunConfig {
    /// Parses `text` over the defaults: keys absent from the file keep their default.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Routes one seed to every random component.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.scheduler.seed = seed;
        self.model.seed = seed;
        self.phantom.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scheduler.validate()?;
        self.model.validate()?;
        if !self.train.out_size.is_multiple_of(crate::model::STRIDE) {
            return Err(Error::Config(format!(
                "train.out_size {} is not a multiple of {}",
                self.train.out_size,
                crate::model::STRIDE
            )));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nepochs = 3\n[scheduler]\nalpha = 2.0\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::toy().batch_size);
        assert_eq!(cfg.scheduler.alpha, 2.0);
        assert_eq!(cfg.scheduler.beta, 5);
        assert_eq!(cfg.model, ModelConfig::toy());
    }

    #[test]
    fn round_trip_and_rejects_bad_values() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("[scheduler]\nbeta = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nout_size = 48\n").is_err());
        assert!(RunConfig::from_toml_str("[train\n").is_err());
    }

    #[test]
    fn infinite_alpha_survives_toml() {
        let cfg = RunConfig::from_toml_str("[scheduler]\nalpha = inf\n").unwrap();
        assert!(cfg.scheduler.alpha.is_infinite());
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(42);
        assert_eq!((cfg.train.seed, cfg.scheduler.seed, cfg.model.seed, cfg.phantom.seed), (42, 42, 42, 42));
    }
}
