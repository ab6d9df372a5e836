//! Dataset ingestion, synthetic data generation, mix-ratio sampling, and
//! batch iteration.

mod batching;
mod cifar;
mod synthetic;

pub use batching::{epoch_batches, sample_mix_ratios, BatchSettings, EpochBatches, TrainBatch};
pub use cifar::load_cifar_binary;
pub use synthetic::make_synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// One image with its class index. Pixels are `[C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    CifarBinary { path: PathBuf, coarse_label_byte: bool },
}

/// Fully validated description of where data comes from and its shape.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Loads (or generates) the train and test splits.
    pub fn load(&self) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), DataError> {
        match &self.source {
            DataSource::Synthetic => make_synthetic(self),
            DataSource::CifarBinary { path, coarse_label_byte } => {
                let all = load_cifar_binary(path, self.num_classes, *coarse_label_byte)?;
                if all.len() < self.train_size + self.test_size {
                    return Err(DataError::Invalid(format!(
                        "{} records available, {} requested",
                        all.len(),
                        self.train_size + self.test_size
                    )));
                }
                let mut it = all.into_iter();
                let train: Vec<_> = it.by_ref().take(self.train_size).collect();
                let test: Vec<_> = it.take(self.test_size).collect();
                Ok((train, test))
            }
        }
    }
}

/// The `[data]` section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: String,
    pub path: Option<String>,
    pub coarse_label_byte: bool,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            path: None,
            coarse_label_byte: false,
            num_classes: 3,
            channels: 1,
            height: 8,
            width: 8,
            train_size: 300,
            test_size: 300,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<DatasetSpec, ConfigError> {
        let fail = |field: &str, message: String| Err(ConfigError { field: format!("data.{field}"), message });
        if self.num_classes < 2 {
            return fail("num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return fail("train_size", "split sizes must be positive".into());
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("height", "image shape must be positive".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail("noise", format!("noise must be a nonnegative number, got {}", self.noise));
        }
        let source = match self.source.as_str() {
            "synthetic" => {
                if self.path.is_some() {
                    return fail("path", "path is only valid for source = \"cifar-binary\"".into());
                }
                DataSource::Synthetic
            }
            "cifar-binary" => {
                let Some(path) = &self.path else {
                    return fail("path", "source = \"cifar-binary\" requires a path".into());
                };
                if self.channels != 3 || self.height != 32 || self.width != 32 {
                    return fail(
                        "channels",
                        format!(
                            "cifar-binary records are 3x32x32, got {}x{}x{}",
                            self.channels, self.height, self.width
                        ),
                    );
                }
                DataSource::CifarBinary {
                    path: PathBuf::from(path),
                    coarse_label_byte: self.coarse_label_byte,
                }
            }
            other => return fail("source", format!("unknown source {other:?}")),
        };
        Ok(DatasetSpec {
            source,
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            train_size: self.train_size,
            test_size: self.test_size,
            noise: self.noise,
            seed: self.seed,
        })
    }
}

/// A set of source images with their one-hot labels and mix ratios.
#[derive(Clone, Debug)]
pub struct MixBatch {
    /// N images, all the same shape.
    pub images: Vec<Tensor>,
    /// N one-hot label vectors of length `num_classes`.
    pub labels: Vec<Tensor>,
    /// N nonnegative ratios summing to 1.
    pub ratios: Vec<f64>,
}

impl MixBatch {
    pub fn n(&self) -> usize {
        self.images.len()
    }
}

pub(crate) fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[label] = 1.0;
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_to_synthetic_spec() {
        let spec = DataConfig::default().validate().unwrap();
        assert_eq!(spec.source, DataSource::Synthetic);
        assert_eq!(spec.num_classes, 3);
        assert_eq!((spec.height, spec.width, spec.channels), (8, 8, 1));
    }

    #[test]
    fn cifar_source_requires_path_and_shape() {
        let cfg = DataConfig { source: "cifar-binary".into(), ..DataConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.field, "data.path");

        let cfg = DataConfig {
            source: "cifar-binary".into(),
            path: Some("x.bin".into()),
            ..DataConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.field, "data.channels");
    }

    #[test]
    fn single_class_is_rejected() {
        let cfg = DataConfig { num_classes: 1, ..DataConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
