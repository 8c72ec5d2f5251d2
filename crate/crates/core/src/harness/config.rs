use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, Dataset, Split, FEATURE_DIM, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::estimators::{BatchMask, GuessOptions, Method};
use crate::metrics::OverlapBasis;

use super::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { num_train: usize, num_test: usize, seed: u64 },
    Files { train: PathBuf, test: PathBuf },
}

impl DataSource {
    pub fn synthetic_default(seed: u64) -> Self {
        DataSource::Synthetic {
            num_train: 4000,
            num_test: 1000,
            seed,
        }
    }

    /// `data/mnist1d_{train,test}.bin` under `root`.
    pub fn mnist1d(root: &Path) -> Self {
        DataSource::Files {
            train: root.join("mnist1d_train.bin"),
            test: root.join("mnist1d_test.bin"),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { num_train, num_test, seed } => generate_synthetic(*num_train, *num_test, *seed),
            DataSource::Files { train, test } => Ok((
                load_dataset(train, None, Split::Train)?,
                load_dataset(test, None, Split::Test)?,
            )),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub layer_widths: Vec<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub metrics_every: u64,
    pub checkpoint_every_epochs: u64,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub freeze_biases: bool,
    pub shared_epsilon: bool,
    pub batch_mask: BatchMask,
    pub overlap_basis: OverlapBasis,
    /// Samples used for the end-of-run overlap curves; 0 skips them.
    pub overlap_samples: usize,
    /// Polynomial bank for `w_perp_ns`; fitted on the fly when absent.
    pub bank: Option<PathBuf>,
    /// Write elapsed seconds in `wall_time_s` (0 otherwise, making logs
    /// byte-reproducible).
    pub record_wall_time: bool,
    /// Worker threads; `None` uses the rayon default. Results do not depend
    /// on it.
    pub threads: Option<usize>,
}

/// `40, w, w, w, 10`: three hidden layers of width `w`.
pub fn default_widths(hidden: usize) -> Vec<usize> {
    vec![FEATURE_DIM, hidden, hidden, hidden, NUM_CLASSES]
}

impl RunConfig {
    pub fn new(method: Method, data: DataSource, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            method,
            layer_widths: default_widths(128),
            epochs: 300,
            batch_size: 512,
            optimizer: AdamWConfig::default(),
            seed: 0,
            metrics_every: 50,
            checkpoint_every_epochs: 50,
            data,
            out_dir: out_dir.into(),
            freeze_biases: false,
            shared_epsilon: false,
            batch_mask: BatchMask::PerSample,
            overlap_basis: OverlapBasis::V,
            overlap_samples: 0,
            bank: None,
            record_wall_time: true,
            threads: None,
        }
    }

    pub fn guess_options(&self) -> GuessOptions {
        GuessOptions {
            shared_epsilon: self.shared_epsilon,
            batch_mask: self.batch_mask,
            freeze_biases: self.freeze_biases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 2 || w.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {w:?}")));
        }
        if *w.last().unwrap() != NUM_CLASSES {
            return Err(Error::Config(format!("last layer width must be {NUM_CLASSES}, got {w:?}")));
        }
        if self.batch_size == 0 || self.metrics_every == 0 || self.checkpoint_every_epochs == 0 {
            return Err(Error::Config(
                "batch size, metrics cadence and checkpoint cadence must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimiser settings {o:?}")));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        Ok(())
    }
}
