//! Adversarial mixup augmentation at desk scale.
//!
//! The crate trains a small residual convolutional classifier against an
//! attention-based generator that mixes several source images under learned
//! policy masks. The two are optimized in alternation: the classifier
//! descends a mixup classification objective while the generator ascends an
//! adversarial objective, regularized by an EMA teacher and cosine
//! similarity so generated samples stay recognizable.
//!
//! Modules:
//! - [`diffmath`]: reverse-mode differentiable array operations on a tape
//! - [`data`]: dataset loading, synthetic data, mix-ratio sampling, batching
//! - [`model`]: classifier, EMA teacher and encoder views, schedules
//! - [`mixblock`]: the attention-based mixed-sample generator
//! - [`objectives`]: loss terms and the two alternating objectives
//! - [`trainer`]: the alternating optimization loop and baselines
//! - [`metrics`]: accuracy, calibration, and robustness evaluation
//! - [`suites`]: reusable property suites (gradients, masks, oracles)

pub mod data;
pub mod diffmath;
pub mod metrics;
pub mod mixblock;
pub mod model;
pub mod objectives;
pub mod suites;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;

/// A rejected configuration field with its diagnostic.
#[derive(Debug, Clone, thiserror::Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}
