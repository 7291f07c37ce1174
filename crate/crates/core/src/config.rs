//! Run configuration documents (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetHandle};
use crate::error::{Error, Result};
use crate::params::hex;
use crate::trainer::TrainerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Procedural 10-class glyph corpus.
    Glyphs,
    /// Synthetic organ/lesion segmentation corpus.
    Shapes,
    /// CSV files under `<data root>/<name>/`.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Directory name for `dir` datasets.
    pub name: String,
    /// Items generated for the training pool (procedural sources).
    pub pool: usize,
    /// Stratified subset size drawn from the pool; 0 keeps everything.
    pub reduced: usize,
    pub reduce_seed: u64,
    /// Held-out items (procedural sources).
    pub test: usize,
    /// Image side length (procedural sources).
    pub size: usize,
    pub data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Glyphs,
            name: String::new(),
            pool: 4000,
            reduced: 1000,
            reduce_seed: 0,
            test: 2000,
            size: 16,
            data_seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            dataset: DatasetConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

/// Train and held-out splits of a run.
pub struct Splits {
    pub train: DatasetHandle,
    pub test: DatasetHandle,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.trainer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        let d = &self.dataset;
        if d.source == DatasetSource::Dir && d.name.is_empty() {
            return Err(Error::Config("dataset.name is required for dir datasets".into()));
        }
        if d.source != DatasetSource::Dir && (d.pool == 0 || d.test == 0) {
            return Err(Error::Config("dataset.pool and dataset.test must be positive".into()));
        }
        if d.reduced > 0 && d.source != DatasetSource::Dir && d.reduced > d.pool {
            return Err(Error::Config(format!("dataset.reduced {} exceeds pool {}", d.reduced, d.pool)));
        }
        Ok(())
    }

    /// SHA-256 of everything that determines the trajectory of a run.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.checkpoint_every = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// Builds (or loads) the datasets. Reduced index lists are cached under
    /// the data root.
    pub fn splits(&self) -> Result<Splits> {
        let d = &self.dataset;
        let root = data::data_root();
        let (train, test) = match d.source {
            DatasetSource::Glyphs => data::glyphs_splits(d.pool, d.test, d.data_seed, d.size)?,
            DatasetSource::Shapes => (
                data::synthetic_shapes_dataset(d.pool, d.data_seed, d.size)?,
                {
                    let mut t = data::synthetic_shapes_dataset(d.test, d.data_seed ^ 0x5eed, d.size)?;
                    t.split = "test".into();
                    t
                },
            ),
            DatasetSource::Dir => (
                data::load_dir(&root, &d.name, "train")?,
                data::load_dir(&root, &d.name, "test")?,
            ),
        };
        let train = if d.reduced > 0 && d.reduced < train.len() {
            if d.source == DatasetSource::Dir {
                data::reduce_cached(&train, d.reduced, d.reduce_seed, &root)?
            } else {
                data::stratified_reduce(&train, d.reduced, d.reduce_seed)?.0
            }
        } else {
            train
        };
        Ok(Splits { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[trainer]\nfd_scal = 0.1").is_err());
        let c = RunConfig::from_toml("seed = 7\n[trainer]\naugmenters = [\"astn\"]").unwrap();
        assert_eq!(c.trainer.seed, 7);
        assert_eq!(c.trainer.weights.astn.lambda_cycle, 0.1);
        assert_eq!(c.trainer.weights.dvae.lambda_smooth, 10.0);
        assert_eq!(c.trainer.weights.pvae.beta, 10.0);
        assert_eq!(c.trainer.augmenter_optimizer.beta1, 0.5);
    }
}
