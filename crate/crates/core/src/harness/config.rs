//! Experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{HyperParams, Variant};
use crate::store::SynthParams;
use crate::train::LossMode;
use crate::{Error, Result};

/// Where the embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Generated per seed; the generator seed is `params.seed + run seed`.
    Synthetic(SynthParams),
    /// SNLE files. `text_pos`/`text_neg` may hold several rows per class
    /// (one per prompt), which are ensembled.
    Files {
        support: PathBuf,
        query: PathBuf,
        text_pos: PathBuf,
        text_neg: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SynthParams::default())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

/// Everything a run needs. Serialized with snake_case keys; every field has
/// a default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// `delta_t`, `delta_v` and `seed` in here are ignored: deltas are
    /// calibrated and the seed comes from `seeds`.
    pub hyper: HyperParams,
    pub variant: Variant,
    /// Objective for variant N. Other variants always use ensemble CE.
    pub negative_objective: LossMode,
    /// Fraction of support labels flipped per class before training.
    pub noise_fraction: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Report path; stdout when absent.
    pub out: Option<PathBuf>,
    /// Optional flat CSV table next to the JSON report.
    pub csv: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            hyper: HyperParams::default(),
            variant: Variant::Full,
            negative_objective: LossMode::EnsembleCe,
            noise_fraction: 0.0,
            seeds: default_seeds(),
            out: None,
            csv: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loss used when training `variant`.
    pub fn objective_for(&self, variant: Variant) -> LossMode {
        if variant == Variant::N {
            self.negative_objective
        } else {
            LossMode::EnsembleCe
        }
    }

    /// Checks everything that can be checked before touching data,
    /// including that referenced files exist.
    pub fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::arg("seeds list is empty"));
        }
        self.hyper.check()?;
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::arg(format!(
                "noise_fraction {} outside [0, 1]",
                self.noise_fraction
            )));
        }
        if let DataConfig::Files {
            support,
            query,
            text_pos,
            text_neg,
        } = &self.data
        {
            for p in [support, query, text_pos, text_neg] {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                    ));
                }
            }
        }
        Ok(())
    }
}
