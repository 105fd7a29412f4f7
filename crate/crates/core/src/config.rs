//! Experiment documents: one JSON file naming the dataset, the training
//! configuration and, optionally, a hyperparameter grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, CifarVariant, Dataset, NormStats, SyntheticSpec};
use crate::error::{Error, Result};
use crate::training::{sha256_hex, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        variant: CifarVariant,
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(spec) => data::gen_synthetic(spec),
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Dataset::from_splits(
                data::load_idx(train_images, train_labels)?,
                data::load_idx(test_images, test_labels)?,
            ),
            DatasetSource::Cifar {
                variant,
                train,
                test,
            } => Dataset::from_splits(
                data::load_cifar_bin(train, *variant)?,
                data::load_cifar_bin(test, *variant)?,
            ),
        }
    }
}

/// Grid for `sweep`. Each cell trains with `epochs_per_stage = interval` and
/// `stages = max(1, total_epochs / interval)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub total_epochs: usize,
    pub intervals: Vec<usize>,
    pub peers: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, empty) in [
            ("sweep.intervals", self.intervals.is_empty()),
            ("sweep.peers", self.peers.is_empty()),
            ("sweep.temperatures", self.temperatures.is_empty()),
            ("sweep.seeds", self.seeds.is_empty()),
        ] {
            if empty {
                errs.push(format!("{name}: grid axis is empty"));
            }
        }
        if self.total_epochs == 0 {
            errs.push("sweep.total_epochs: must be >= 1".into());
        }
        if self.intervals.contains(&0) {
            errs.push("sweep.intervals: must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &interval in &self.intervals {
            for &peers in &self.peers {
                for &temperature in &self.temperatures {
                    for &seed in &self.seeds {
                        out.push(SweepCell {
                            interval,
                            peers,
                            temperature,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn stages_for(&self, interval: usize) -> usize {
        (self.total_epochs / interval).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub interval: usize,
    pub peers: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    /// Standardize features with train-split statistics.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

impl ExperimentConfig {
    /// Default synthetic benchmark with the default training schedule.
    pub fn tri_blob(seed: u64) -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSpec::tri_blob(seed)),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            normalize: false,
            sweep: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [
            self.train.validate(),
            match &self.dataset {
                DatasetSource::Synthetic(s) => s.validate(),
                _ => Ok(()),
            },
            self.sweep.as_ref().map_or(Ok(()), SweepGrid::validate),
        ] {
            match r {
                Ok(()) => {}
                Err(Error::Config(e)) => errs.extend(e),
                Err(other) => errs.push(other.to_string()),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Dataset, normalized when requested, with the statistics used.
    pub fn load_dataset(&self) -> Result<(Dataset, Option<NormStats>)> {
        let ds = self.dataset.load()?;
        if self.normalize {
            let stats = NormStats::from_train(&ds)?;
            Ok((data::normalize_dataset(&ds, &stats)?, Some(stats)))
        } else {
            Ok((ds, None))
        }
    }
}
