//! JSON run configuration shared by the command-line tool.
//!
//! Every section and field is optional and falls back to its default;
//! unknown keys are rejected.
//!
//! ```json
//! {
//!   "net":   { "levels": 3, "base_channels": 8, "num_classes": 3, "scheme": "3DQ" },
//!   "train": { "learning_rate": 0.0001, "iterations": 200, "patch_size": 16,
//!              "batch_size": 4, "seed": 0, "loss_mix": 0.5,
//!              "recalibration_batches": 8 },
//!   "data":  { "num_volumes": 10, "volume_size": 32, "noise_sigma": 0.1,
//!              "train_fraction": 0.8, "seed": 7 },
//!   "output": { "dir": "runs/default", "name": "model" }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{NetConfig, TrainConfig};
use crate::voldata::{generate_dataset, split, DataConfig, VolumeSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File stem for checkpoints and logs.
    pub name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), name: "model".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate(self.net.levels)?;
        let d = &self.data;
        if d.volume_size < self.train.patch_size {
            return Err(Error::Config(format!(
                "volume_size {} is smaller than patch_size {}",
                d.volume_size, self.train.patch_size
            )));
        }
        let m = self.net.size_multiple();
        if d.volume_size % m != 0 {
            return Err(Error::Config(format!(
                "volume_size {} must be a multiple of {m} for {} levels",
                d.volume_size, self.net.levels
            )));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1), got {}", d.train_fraction)));
        }
        let n_train = (d.num_volumes as f64 * d.train_fraction).round() as usize;
        if n_train == 0 || n_train == d.num_volumes {
            return Err(Error::Config(format!(
                "{} volumes with train_fraction {} leave an empty split",
                d.num_volumes, d.train_fraction
            )));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", d.noise_sigma)));
        }
        Ok(())
    }

    /// Generate the synthetic dataset and split it into `(train, test)`.
    pub fn dataset(&self) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
        let d = &self.data;
        let volumes = generate_dataset(d.num_volumes, d.seed, d.volume_size, self.net.num_classes, d.noise_sigma)?;
        split(volumes, d.train_fraction, d.seed)
    }
}
