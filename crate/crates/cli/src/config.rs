use std::path::Path;

use affordance_core::dataset::DatasetConfig;
use affordance_core::metrics::MetricOptions;
use affordance_core::model::ModelConfig;
use affordance_core::training::TrainConfig;
use affordance_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub metrics: MetricOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            metrics: MetricOptions::default(),
        }
    }
}

/// Everything a run needs. Every section and key is optional in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.dataset.check()?;
        cfg.pretrain.check()?;
        cfg.finetune.check()?;
        if !(cfg.eval.threshold > 0.0 && cfg.eval.threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold {} must lie in (0, 1)",
                cfg.eval.threshold
            )));
        }
        Ok(cfg)
    }

    /// One seed for data, both training stages and everything derived from them.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
