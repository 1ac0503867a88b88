//! TOML run configuration. Every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The only source of randomness for model init and batch sampling.
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grad_check: GradCheckConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.grad_check.k == 0 || !positive(self.grad_check.step) || !positive(self.grad_check.tolerance) {
            return Err(Error::Config("grad_check needs k >= 1 and positive step and tolerance".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.window, 7);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.model.decoder.hidden_dim, 256);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml_str("sed = 3").is_err());
        assert!(RunConfig::from_toml_str("[model]\nwindw = 3").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlr = 1e-3\nfoo = 1").is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::from_toml_str("[model]\nwindow = 4").is_err());
        assert!(RunConfig::from_toml_str("[train]\nk_set = []").is_err());
    }

    #[test]
    fn parse_serialize_parse_is_idempotent() {
        let text = r#"
            seed = 17
            [model]
            window = 3
            [model.encoder]
            channels = 4
            n_res_blocks = 2
            [train]
            lr = 3e-3
            k_set = [2, 4]
            max_pairs_per_patch = 4096
            [paths]
            data_dir = "data/hr"
        "#;
        let a = RunConfig::from_toml_str(text).unwrap();
        let s = a.to_toml_string().unwrap();
        let b = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, b.to_toml_string().unwrap());
        assert_eq!(b.model.encoder.channels, 4);
        assert_eq!(b.paths.data_dir.as_deref(), Some(Path::new("data/hr")));
    }
}
