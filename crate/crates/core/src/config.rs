//! Run configuration: one JSON document per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::rawgat::RawGatConfig;

/// A protocol file and the directory holding its `<utt_id>.wav` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub protocol: PathBuf,
    pub audio_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<Split>,
    pub dev: Option<Split>,
    pub eval: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Threads for loading and augmentation.
    pub workers: usize,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            epochs: 100,
            batch_size: 16,
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn rawgat() -> Self {
        Self {
            model: ModelConfig::RawGat(RawGatConfig::default()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for batch normalization".into(),
            ));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    /// Reads a config; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for split in [
            &mut self.data.train,
            &mut self.data.dev,
            &mut self.data.eval,
        ]
        .into_iter()
        .flatten()
        {
            fix(&mut split.protocol);
            fix(&mut split.audio_dir);
        }
        for list in [
            &mut self.augment.rir_list,
            &mut self.augment.speech_list,
            &mut self.augment.music_list,
            &mut self.augment.noise_list,
        ]
        .into_iter()
        .flatten()
        {
            fix(list);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
