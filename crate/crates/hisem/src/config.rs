//! One JSON document configures a whole run. Every field has a default,
//! unknown keys are rejected by name, and `HISEM_SEED` overrides the
//! seed from the environment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{HisemError, Result};
use crate::hasd::MoEConfig;
use crate::model::ModelConfig;
use crate::training::CurriculumConfig;

pub const SEED_ENV: &str = "HISEM_SEED";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub bdam_depth: usize,
    pub bdam_hidden: usize,
    pub decoder_depth: usize,
    pub decoder_hidden: usize,
    /// Maximum caption length including BOS/EOS.
    pub n_max: usize,
    pub moe: MoEConfig,
    pub curriculum: CurriculumConfig,
    pub gen: GenConfig,
    pub min_freq: usize,
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            d: 64,
            grid_h: 7,
            grid_w: 7,
            bdam_depth: 3,
            bdam_hidden: 64,
            decoder_depth: 1,
            decoder_hidden: 256,
            n_max: 26,
            moe: MoEConfig::default(),
            curriculum: CurriculumConfig::default(),
            gen: GenConfig::default(),
            min_freq: 1,
            data: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| HisemError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| HisemError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env();
        Ok(cfg)
    }

    /// Folds `HISEM_SEED` (when set) into both seed fields.
    pub fn apply_env(&mut self) {
        if let Ok(s) = std::env::var(SEED_ENV) {
            if let Ok(seed) = s.parse::<u64>() {
                self.seed = seed;
            }
        }
        self.curriculum.seed = self.seed;
    }

    /// The path named by `data`, or a config error naming the key.
    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| HisemError::Config("missing config key: data".into()))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            grid: (self.grid_h, self.grid_w),
            bdam_depth: self.bdam_depth,
            bdam_hidden: self.bdam_hidden,
            decoder_depth: self.decoder_depth,
            decoder_hidden: self.decoder_hidden,
            n_max: self.n_max,
            moe: self.moe,
            vocab_size,
            tied_bdam: false,
        }
    }

    /// Echoes the merged effective config for provenance.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| HisemError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn partial_json_fills_defaults() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"d": 16, "curriculum": {"total_epochs": 7}}"#).unwrap();
        std::env::remove_var(SEED_ENV);
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.d, 16);
        assert_eq!(cfg.curriculum.total_epochs, 7);
        assert_eq!(cfg.curriculum.lambda, 0.8);
        assert_eq!(cfg.grid_h, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"grid_hh": 3}"#).unwrap();
        match RunConfig::load(&p) {
            Err(HisemError::Config(msg)) => assert!(msg.contains("grid_hh"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_data_key_is_named() {
        let cfg = RunConfig::default();
        match cfg.data_path() {
            Err(HisemError::Config(msg)) => assert!(msg.contains("data")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_save() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("echo.json");
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.curriculum.seed = 9;
        cfg.save(&p).unwrap();
        std::env::remove_var(SEED_ENV);
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.curriculum.seed, 9);
    }
}
