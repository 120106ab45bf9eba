//! Train/test splits from the configured data source.

use gatenas_core::data::{synthetic_blobs, BlobSpec, Dataset};

use crate::config::{DataConfig, DataSource};
use crate::{idx, Result};

/// MNIST has ten digit classes.
pub const MNIST_CLASSES: usize = 10;

pub fn load(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.source {
        DataSource::SyntheticBlobs { classes, channels, size, noise, seed } => {
            let spec = BlobSpec {
                classes: *classes,
                samples: cfg.train_samples + cfg.test_samples,
                channels: *channels,
                size: *size,
                noise: *noise,
                seed: *seed,
            };
            let all = synthetic_blobs(&spec)?;
            let train = all.slice(0..cfg.train_samples)?;
            let test = all.slice(cfg.train_samples..all.len())?;
            Ok((train, test))
        }
        DataSource::MnistIdx { train_images, train_labels, test_images, test_labels } => {
            let train = idx::load_idx(train_images, train_labels, MNIST_CLASSES, Some(cfg.train_samples))?;
            let test = idx::load_idx(test_images, test_labels, MNIST_CLASSES, Some(cfg.test_samples))?;
            Ok((train, test))
        }
    }
}
