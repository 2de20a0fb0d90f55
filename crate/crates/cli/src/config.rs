use std::path::{Path, PathBuf};

use cfa_core::gnn::train::TrainConfig;
use cfa_core::Result;
use serde::{Deserialize, Serialize};

/// Default locations for the pipeline artifacts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

/// Contents of the `--config` JSON file. Every value can be overridden by
/// a command-line flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub paths: Paths,
    pub train: TrainConfig,
    pub constant_16th_feature: bool,
    pub seed: Option<u64>,
    pub log_level: Option<String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let bytes = std::fs::read(path)?;
        let config: Config = serde_json::from_slice(&bytes)?;
        config.train.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfa_core::Error;

    #[test]
    fn defaults_match_training_defaults() {
        let c: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.lr0, 0.01);
        assert_eq!(c.train.patience, 500);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"train": {"lr": 0.1}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"paths": {"modl": "m.json"}}"#).is_err());
    }

    #[test]
    fn partial_train_override() {
        let c: Config = serde_json::from_str(r#"{"train": {"max_epochs": 50, "patience": 10}, "seed": 3}"#).unwrap();
        assert_eq!(c.train.max_epochs, 50);
        assert_eq!(c.train.lr0, TrainConfig::default().lr0);
        assert_eq!(c.seed, Some(3));
    }

    #[test]
    fn invalid_hyperparameters_are_errors() {
        let dir = std::env::temp_dir().join(format!("cfa-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, r#"{"train": {"patience": 0}}"#).unwrap();
        assert!(matches!(Config::load(Some(&path)), Err(Error::Model(_))));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
