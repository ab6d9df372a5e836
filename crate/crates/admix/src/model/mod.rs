//! The classifier and its two EMA shadows.
//!
//! The backbone is a small residual CNN: a 3x3 stem, then one stage per
//! configured width. Stage 1 keeps resolution, later stages downsample by
//! stride 2 in their first block. The classifier adds global average
//! pooling and an affine head. The encoder view mirrors the first
//! `feature_stage` stages and the teacher mirrors the whole classifier;
//! both are updated only through exponential moving averages, never by an
//! optimizer.

pub mod checkpoint;
mod ema;

pub use ema::{ema_tensors, ema_update_backbone, ema_update_classifier, ema_update_encoder, XiSchedule};

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{BnMode, DiffError, Tape, Var};
use crate::tensor::Tensor;
use crate::ConfigError;

pub const BN_EPS: f64 = 1e-5;
/// Weight given to the newest batch statistics in the running buffers.
pub const BN_MOMENTUM: f64 = 0.1;

/// The `[model]` section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stage whose activations feed the mix generator.
    pub feature_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { widths: vec![8, 16, 32, 64], blocks_per_stage: 1, feature_stage: 3 }
    }
}

impl ModelConfig {
    pub fn validate(
        &self,
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    ) -> Result<ArchDescriptor, ConfigError> {
        let fail =
            |field: &str, message: String| Err(ConfigError { field: format!("model.{field}"), message });
        if self.widths.len() < 4 {
            return fail("widths", format!("need at least 4 stages, got {}", self.widths.len()));
        }
        if self.widths.contains(&0) {
            return fail("widths", "stage widths must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage", "need at least one block per stage".into());
        }
        if self.feature_stage == 0 || self.feature_stage > self.widths.len() {
            return fail(
                "feature_stage",
                format!("feature_stage {} outside 1..={}", self.feature_stage, self.widths.len()),
            );
        }
        Ok(ArchDescriptor {
            in_channels,
            height,
            width,
            widths: self.widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            classes,
            feature_stage: self.feature_stage,
        })
    }
}

/// Resolved architecture: every forward shape is a function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
    pub feature_stage: usize,
}

impl ArchDescriptor {
    /// `(channels, h, w)` of the activation map after stage `l` (1-based).
    pub fn stage_shape(&self, l: usize) -> (usize, usize, usize) {
        let mut h = self.height;
        let mut w = self.width;
        for _ in 2..=l {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (self.widths[l - 1], h, w)
    }
}

/// Convolution followed by batch normalization, the unit every layer of the
/// backbone is built from.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    fn init(rng: &mut ChaCha20Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = Tensor::from_vec(
            (0..cout * cin * k * k).map(|_| dist.sample(rng)).collect(),
            &[cout, cin, k, k],
        )
        .expect("shape");
        ConvBn {
            weight,
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            run_mean: Tensor::zeros(&[cout]),
            run_var: Tensor::full(&[cout], 1.0),
            stride,
            pad,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub down: Option<ConvBn>,
}

/// Stem plus residual stages. The classifier owns a full backbone; the
/// encoder view owns a truncated clone of one.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBn,
    pub stages: Vec<Vec<Block>>,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub descriptor: ArchDescriptor,
    pub backbone: Backbone,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Backbone {
    fn init(rng: &mut ChaCha20Rng, in_channels: usize, widths: &[usize], blocks: usize, stages: usize) -> Self {
        let stem = ConvBn::init(rng, in_channels, widths[0], 3, 1, 1);
        let mut stage_list = Vec::with_capacity(stages);
        let mut cin = widths[0];
        for (si, &cout) in widths.iter().take(stages).enumerate() {
            let mut blocks_vec = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let block_in = if bi == 0 { cin } else { cout };
                let down = if stride != 1 || block_in != cout {
                    Some(ConvBn::init(rng, block_in, cout, 1, stride, 0))
                } else {
                    None
                };
                blocks_vec.push(Block {
                    conv1: ConvBn::init(rng, block_in, cout, 3, stride, 1),
                    conv2: ConvBn::init(rng, cout, cout, 3, 1, 1),
                    down,
                });
            }
            stage_list.push(blocks_vec);
            cin = cout;
        }
        Backbone { stem, stages: stage_list }
    }

    /// Learnable tensors in canonical (forward) order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in self.conv_layers() {
            out.push(&layer.weight);
            out.push(&layer.gamma);
            out.push(&layer.beta);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.conv_layers_mut() {
            let ConvBn { weight, gamma, beta, .. } = layer;
            out.push(weight);
            out.push(gamma);
            out.push(beta);
        }
        out
    }

    pub fn conv_layers(&self) -> Vec<&ConvBn> {
        let mut out = vec![&self.stem];
        for stage in &self.stages {
            for block in stage {
                out.push(&block.conv1);
                out.push(&block.conv2);
                if let Some(d) = &block.down {
                    out.push(d);
                }
            }
        }
        out
    }

    /// Layers of the stem plus the first `l` stages, in forward order.
    pub fn prefix_layers(&self, l: usize) -> Vec<&ConvBn> {
        let mut out = vec![&self.stem];
        for stage in &self.stages[..l] {
            for block in stage {
                out.push(&block.conv1);
                out.push(&block.conv2);
                if let Some(d) = &block.down {
                    out.push(d);
                }
            }
        }
        out
    }

    fn layer_names(&self) -> Vec<String> {
        let mut out = vec!["stem".to_string()];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                out.push(format!("stage{si}.block{bi}.conv1"));
                out.push(format!("stage{si}.block{bi}.conv2"));
                if block.down.is_some() {
                    out.push(format!("stage{si}.block{bi}.down"));
                }
            }
        }
        out
    }

    /// Every tensor (parameters and running statistics) with a stable name,
    /// in canonical order. The mutable variant matches it exactly.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in self.layer_names().into_iter().zip(self.conv_layers()) {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.gamma"), &layer.gamma));
            out.push((format!("{name}.beta"), &layer.beta));
            out.push((format!("{name}.run_mean"), &layer.run_mean));
            out.push((format!("{name}.run_var"), &layer.run_var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = self.layer_names();
        let mut out = Vec::new();
        for (name, layer) in names.into_iter().zip(self.conv_layers_mut()) {
            let ConvBn { weight, gamma, beta, run_mean, run_var, .. } = layer;
            out.push((format!("{name}.weight"), weight));
            out.push((format!("{name}.gamma"), gamma));
            out.push((format!("{name}.beta"), beta));
            out.push((format!("{name}.run_mean"), run_mean));
            out.push((format!("{name}.run_var"), run_var));
        }
        out
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out = vec![&mut self.stem];
        for stage in &mut self.stages {
            for block in stage {
                out.push(&mut block.conv1);
                out.push(&mut block.conv2);
                if let Some(d) = &mut block.down {
                    out.push(d);
                }
            }
        }
        out
    }

    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mount_layer = |tape: &mut Tape, l: &ConvBn| -> ConvBnVars {
            let reg = |tape: &mut Tape, t: &Tensor| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            };
            ConvBnVars {
                weight: reg(tape, &l.weight),
                gamma: reg(tape, &l.gamma),
                beta: reg(tape, &l.beta),
                run_mean: l.run_mean.data().to_vec(),
                run_var: l.run_var.data().to_vec(),
                stride: l.stride,
                pad: l.pad,
            }
        };
        BackboneVars {
            stem: mount_layer(tape, &self.stem),
            stages: self
                .stages
                .iter()
                .map(|stage| {
                    stage
                        .iter()
                        .map(|b| BlockVars {
                            conv1: mount_layer(tape, &b.conv1),
                            conv2: mount_layer(tape, &b.conv2),
                            down: b.down.as_ref().map(|d| mount_layer(tape, d)),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Folds pending batch statistics (in forward order) into the running
    /// buffers. The list must cover whole forward passes over this backbone.
    pub fn commit_bn(&mut self, pending: &[crate::diffmath::norm::BnStats]) -> Result<(), DiffError> {
        let mut layers = self.conv_layers_mut();
        let n_layers = layers.len();
        if !pending.len().is_multiple_of(n_layers) {
            return Err(DiffError::Invalid {
                op: "commit_bn",
                detail: format!("{} stats for {} layers", pending.len(), n_layers),
            });
        }
        for (i, stats) in pending.iter().enumerate() {
            let layer = &mut layers[i % n_layers];
            let unbiased: Vec<f64> = if stats.count > 1 {
                let corr = stats.count as f64 / (stats.count - 1) as f64;
                stats.var.iter().map(|v| v * corr).collect()
            } else {
                stats.var.clone()
            };
            for (rm, m) in layer.run_mean.data_mut().iter_mut().zip(&stats.mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, v) in layer.run_var.data_mut().iter_mut().zip(&unbiased) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }
}

impl Classifier {
    pub fn init(descriptor: ArchDescriptor, rng: &mut ChaCha20Rng) -> Self {
        let backbone = Backbone::init(
            rng,
            descriptor.in_channels,
            &descriptor.widths,
            descriptor.blocks_per_stage,
            descriptor.widths.len(),
        );
        let last = *descriptor.widths.last().expect("validated");
        let dist = Normal::new(0.0, 0.01).expect("finite std");
        let head_w = Tensor::from_vec(
            (0..descriptor.classes * last).map(|_| dist.sample(rng)).collect(),
            &[descriptor.classes, last],
        )
        .expect("shape");
        let head_b = Tensor::zeros(&[descriptor.classes]);
        Classifier { descriptor, backbone, head_w, head_b }
    }

    /// Clones the stem and first `l` stages as an encoder view.
    pub fn encoder_prefix(&self, l: usize) -> Result<Backbone, DiffError> {
        if l == 0 || l > self.backbone.stages.len() {
            return Err(DiffError::Invalid {
                op: "encoder_prefix",
                detail: format!("stage {} outside 1..={}", l, self.backbone.stages.len()),
            });
        }
        Ok(Backbone { stem: self.backbone.stem.clone(), stages: self.backbone.stages[..l].to_vec() })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.backbone.params();
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_tensors_mut();
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        let backbone = self.backbone.mount(tape, trainable);
        let (head_w, head_b) = if trainable {
            (tape.param(self.head_w.clone()), tape.param(self.head_b.clone()))
        } else {
            (tape.leaf(self.head_w.clone()), tape.leaf(self.head_b.clone()))
        };
        ClassifierVars {
            backbone,
            head_w,
            head_b,
            in_channels: self.descriptor.in_channels,
            height: self.descriptor.height,
            width: self.descriptor.width,
        }
    }

    /// Inference-mode class probabilities for a batch of `[C, H, W]` images.
    pub fn predict_probs(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>, DiffError> {
        let mut tape = Tape::new();
        let x = tape.leaf(stack_images(images)?);
        let vars = self.mount(&mut tape, false);
        let logits = vars.forward(&mut tape, x, BnMode::Running, &mut Vec::new())?;
        let probs = tape.softmax(logits, 1)?;
        let t = tape.value(probs);
        let k = t.shape()[1];
        Ok(t.data().chunks(k).map(|c| c.to_vec()).collect())
    }
}

pub struct ConvBnVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
    run_mean: Vec<f64>,
    run_var: Vec<f64>,
    stride: usize,
    pad: usize,
}

impl ConvBnVars {
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: BnMode,
        pending: &mut Vec<crate::diffmath::norm::BnStats>,
    ) -> Result<Var, DiffError> {
        let c = tape.conv2d(x, self.weight, None, self.stride, self.pad)?;
        let stats = match mode {
            BnMode::Batch => None,
            BnMode::Running => Some((self.run_mean.as_slice(), self.run_var.as_slice())),
        };
        let (y, computed) = tape.batch_norm(c, self.gamma, self.beta, mode, stats, BN_EPS)?;
        if mode == BnMode::Batch {
            pending.push(computed);
        }
        Ok(y)
    }
}

pub struct BlockVars {
    pub conv1: ConvBnVars,
    pub conv2: ConvBnVars,
    pub down: Option<ConvBnVars>,
}

pub struct BackboneVars {
    pub stem: ConvBnVars,
    pub stages: Vec<Vec<BlockVars>>,
}

impl BackboneVars {
    /// Tape handles of the learnable parameters, in the same order as
    /// [`Backbone::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut layers = vec![&self.stem];
        for stage in &self.stages {
            for block in stage {
                layers.push(&block.conv1);
                layers.push(&block.conv2);
                if let Some(d) = &block.down {
                    layers.push(d);
                }
            }
        }
        layers.into_iter().flat_map(|l| [l.weight, l.gamma, l.beta]).collect()
    }

    /// Activations after the first `upto` stages.
    pub fn features(
        &self,
        tape: &mut Tape,
        x: Var,
        upto: usize,
        mode: BnMode,
        pending: &mut Vec<crate::diffmath::norm::BnStats>,
    ) -> Result<Var, DiffError> {
        if upto > self.stages.len() {
            return Err(DiffError::Invalid {
                op: "features",
                detail: format!("stage {} outside 1..={}", upto, self.stages.len()),
            });
        }
        let mut h = self.stem.forward(tape, x, mode, pending)?;
        h = tape.relu(h)?;
        for stage in &self.stages[..upto] {
            for block in stage {
                let mut main = block.conv1.forward(tape, h, mode, pending)?;
                main = tape.relu(main)?;
                main = block.conv2.forward(tape, main, mode, pending)?;
                let skip = match &block.down {
                    Some(d) => d.forward(tape, h, mode, pending)?,
                    None => h,
                };
                let joined = tape.add(main, skip)?;
                h = tape.relu(joined)?;
            }
        }
        Ok(h)
    }
}

pub struct ClassifierVars {
    pub backbone: BackboneVars,
    pub head_w: Var,
    pub head_b: Var,
    in_channels: usize,
    height: usize,
    width: usize,
}

impl ClassifierVars {
    /// Tape handles of the learnable parameters, in the same order as
    /// [`Classifier::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = self.backbone.param_vars();
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(), DiffError> {
        let s = tape.shape_of(x);
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.height || s[3] != self.width {
            return Err(DiffError::Shape {
                op: "classifier_forward",
                detail: format!(
                    "input {:?} does not match descriptor [*, {}, {}, {}]",
                    s, self.in_channels, self.height, self.width
                ),
            });
        }
        Ok(())
    }

    /// Penultimate representation: globally pooled last-stage features.
    pub fn pooled_features(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: BnMode,
        pending: &mut Vec<crate::diffmath::norm::BnStats>,
    ) -> Result<Var, DiffError> {
        self.check_input(tape, x)?;
        let stages = self.backbone.stages.len();
        let f = self.backbone.features(tape, x, stages, mode, pending)?;
        tape.global_avg_pool(f)
    }

    /// Logits of shape `[B, classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: BnMode,
        pending: &mut Vec<crate::diffmath::norm::BnStats>,
    ) -> Result<Var, DiffError> {
        let p = self.pooled_features(tape, x, mode, pending)?;
        tape.linear(p, self.head_w, self.head_b)
    }
}

/// Stage-`l` features of the encoder view. Gradients never flow into the
/// encoder's parameters because they are mounted as constants.
pub fn encoder_features(
    tape: &mut Tape,
    encoder: &BackboneVars,
    x: Var,
    l: usize,
) -> Result<Var, DiffError> {
    if l == 0 || l > encoder.stages.len() {
        return Err(DiffError::Invalid {
            op: "encoder_features",
            detail: format!("stage {} outside 1..={}", l, encoder.stages.len()),
        });
    }
    encoder.features(tape, x, l, BnMode::Running, &mut Vec::new())
}

/// Stacks `[C, H, W]` images into one `[B, C, H, W]` batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor, DiffError> {
    if images.is_empty() {
        return Err(DiffError::Invalid { op: "stack_images", detail: "empty batch".into() });
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(DiffError::Shape {
            op: "stack_images",
            detail: format!("expected [C, H, W] images, got {:?}", shape),
        });
    }
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(DiffError::Shape {
                op: "stack_images",
                detail: format!("mixed shapes {:?} and {:?}", shape, img.shape()),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(data, &full)
}
