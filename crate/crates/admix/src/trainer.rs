//! The alternating adversarial optimization loop.
//!
//! Per batch: K mix sets are drawn, the generator produces the mixed images
//! once (the classifier's inner steps reuse them since the generator is
//! frozen there), then T1 classifier descent steps and T2 generator ascent
//! steps run, and finally both EMA shadows absorb the classifier. The
//! classifier and generator never share a gradient path with the teacher or
//! encoder: those are mounted as constants on every tape.
//!
//! Two baseline modes bypass the adversarial machinery: plain cross-entropy
//! training, and two-image linear mixup with a Beta-drawn ratio.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    epoch_batches, sample_mix_ratios, BatchSettings, DataError, LabeledImage, TrainBatch,
};
use crate::diffmath::{BnMode, DiffError, Tape, Var};
use crate::mixblock::{generate_from_features, GeneratorParams};
use crate::model::checkpoint::{self, CheckpointError, Section};
use crate::model::{
    ema_update_classifier, ema_update_encoder, ArchDescriptor, Backbone, Classifier, XiSchedule,
};
use crate::objectives::{
    ace_loss, amce_loss, classifier_objective, cosine_loss_from_features, generator_objective,
    mce_loss, teacher_source_features, CosineSign, LossReport, LossWeights, SetBatch,
};
use crate::tensor::Tensor;
use crate::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged after skipping {skipped} batches")]
    Diverged { skipped: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Alternating min-max training against the mix generator.
    #[default]
    Adversarial,
    /// Two-image linear pixel mixup.
    InputMixup,
    /// Plain cross-entropy.
    Vanilla,
}

/// The `[train]` section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Symmetric Dirichlet concentration for mix-ratio draws.
    pub mix_concentration: f64,
    /// Images per mix set (N).
    pub images_per_set: usize,
    pub classifier_lr: f64,
    /// Generator ascent rate; defaults to a tenth of the classifier rate.
    pub generator_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Mix sets per batch (K); defaults to floor(batch_size / images_per_set).
    pub sets_per_batch: Option<usize>,
    /// Classifier descent steps per batch (T1).
    pub classifier_steps: usize,
    /// Generator ascent steps per batch (T2). Zero disables the adversary.
    pub generator_steps: usize,
    pub epochs: usize,
    pub xi_start: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub cosine_sign: CosineSign,
    pub augment_flip: bool,
    pub augment_crop: bool,
    pub crop_padding: usize,
    /// Failed batches tolerated before training aborts.
    pub max_skips: usize,
    /// Checkpoint every this many epochs; zero keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 0.3,
            mix_concentration: 1.0,
            images_per_set: 3,
            classifier_lr: 0.1,
            generator_lr: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 100,
            sets_per_batch: None,
            classifier_steps: 1,
            generator_steps: 1,
            epochs: 200,
            xi_start: 0.999,
            seed: 0,
            mode: TrainMode::Adversarial,
            cosine_sign: CosineSign::Equation,
            augment_flip: false,
            augment_crop: false,
            crop_padding: 4,
            max_skips: 5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail =
            |field: &str, message: String| Err(ConfigError { field: format!("train.{field}"), message });
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return fail(name, format!("{v} outside [0, 1]"));
            }
        }
        if !self.mix_concentration.is_finite() || self.mix_concentration <= 0.0 {
            return fail("mix_concentration", format!("{} must be positive", self.mix_concentration));
        }
        if !self.classifier_lr.is_finite() || self.classifier_lr <= 0.0 {
            return fail("classifier_lr", format!("{} must be positive", self.classifier_lr));
        }
        if let Some(g) = self.generator_lr {
            if !g.is_finite() || g <= 0.0 {
                return fail("generator_lr", format!("{g} must be positive"));
            }
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail("weight_decay", format!("{} must be nonnegative", self.weight_decay));
        }
        if !self.xi_start.is_finite() || !(0.0..=1.0).contains(&self.xi_start) {
            return fail("xi_start", format!("{} outside [0, 1]", self.xi_start));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "batch size must be positive".into());
        }
        if self.classifier_steps == 0 {
            return fail("classifier_steps", "need at least one classifier step".into());
        }
        if self.epochs == 0 {
            return fail("epochs", "need at least one epoch".into());
        }
        match self.mode {
            TrainMode::Adversarial => {
                if self.images_per_set < 2 {
                    return fail(
                        "images_per_set",
                        format!("adversarial mode needs at least 2, got {}", self.images_per_set),
                    );
                }
            }
            TrainMode::InputMixup => {
                if self.images_per_set != 2 {
                    return fail(
                        "images_per_set",
                        format!("input-mixup requires exactly 2, got {}", self.images_per_set),
                    );
                }
            }
            TrainMode::Vanilla => {}
        }
        if self.images_per_set == 0 || self.batch_size < self.images_per_set {
            return fail(
                "batch_size",
                format!("batch size {} below images_per_set {}", self.batch_size, self.images_per_set),
            );
        }
        if let Some(k) = self.sets_per_batch {
            let max = self.batch_size / self.images_per_set;
            if k == 0 || k > max {
                return fail("sets_per_batch", format!("{k} outside 1..={max}"));
            }
        }
        Ok(())
    }

    /// Fills defaulted fields with their concrete values so a serialized
    /// config carries no implicit state.
    pub fn resolve(&mut self) {
        if self.generator_lr.is_none() {
            self.generator_lr = Some(self.classifier_lr / 10.0);
        }
        if self.sets_per_batch.is_none() {
            self.sets_per_batch = Some(self.batch_size / self.images_per_set);
        }
    }

    pub fn generator_lr_value(&self) -> f64 {
        self.generator_lr.unwrap_or(self.classifier_lr / 10.0)
    }

    pub fn sets_per_batch_value(&self) -> usize {
        self.sets_per_batch.unwrap_or(self.batch_size / self.images_per_set)
    }

    fn batch_settings(&self, num_classes: usize) -> BatchSettings {
        BatchSettings {
            batch_size: self.batch_size,
            images_per_set: self.images_per_set,
            sets_per_batch: self.sets_per_batch,
            concentration: self.mix_concentration,
            num_classes,
            augment_flip: self.augment_flip,
            augment_crop: self.augment_crop,
            crop_padding: self.crop_padding,
            seed: self.seed,
        }
    }
}

/// All four parameter sets plus the step counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub classifier: Classifier,
    pub generator: GeneratorParams,
    pub teacher: Classifier,
    pub encoder: Backbone,
    pub step: u64,
}

impl ModelState {
    /// Initializes the classifier and generator from the seed; the teacher
    /// and encoder start as bit-identical copies of the classifier.
    pub fn init(descriptor: &ArchDescriptor, rng: &mut ChaCha20Rng) -> Result<Self, DiffError> {
        let classifier = Classifier::init(descriptor.clone(), rng);
        let feature_channels = descriptor.stage_shape(descriptor.feature_stage).0;
        let generator = GeneratorParams::init(feature_channels, rng);
        let teacher = classifier.clone();
        let encoder = classifier.encoder_prefix(descriptor.feature_stage)?;
        Ok(ModelState { classifier, generator, teacher, encoder, step: 0 })
    }

    pub fn feature_stage(&self) -> usize {
        self.encoder.stages.len()
    }

    fn owned_sections(&self) -> Vec<Section> {
        let owned = |tensors: Vec<(String, &Tensor)>| {
            tensors.into_iter().map(|(n, t)| (n, t.clone())).collect()
        };
        vec![
            Section { name: "classifier".into(), tensors: owned(self.classifier.named_tensors()) },
            Section { name: "generator".into(), tensors: owned(self.generator.named_tensors()) },
            Section { name: "teacher".into(), tensors: owned(self.teacher.named_tensors()) },
            Section { name: "encoder".into(), tensors: owned(self.encoder.named_tensors()) },
        ]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        checkpoint::write_checkpoint(path, &self.classifier.descriptor, self.step, &self.owned_sections())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let (descriptor, step, sections) = checkpoint::read_checkpoint(path)?;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut state = ModelState::init(&descriptor, &mut rng)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        state.step = step;
        let fill = |name: &str, targets: Vec<(String, &mut Tensor)>| -> Result<(), CheckpointError> {
            let section = sections
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| CheckpointError::Format(format!("missing section {name}")))?;
            if section.tensors.len() != targets.len() {
                return Err(CheckpointError::Format(format!(
                    "section {name}: {} tensors, expected {}",
                    section.tensors.len(),
                    targets.len()
                )));
            }
            for ((tname, stored), (ename, slot)) in section.tensors.iter().zip(targets) {
                if *tname != ename || stored.shape() != slot.shape() {
                    return Err(CheckpointError::Format(format!(
                        "section {name}: tensor {tname} does not match expected {ename}"
                    )));
                }
                *slot = stored.clone();
            }
            Ok(())
        };
        fill("classifier", state.classifier.named_tensors_mut())?;
        fill("generator", state.generator.named_tensors_mut())?;
        fill("teacher", state.teacher.named_tensors_mut())?;
        fill("encoder", state.encoder.named_tensors_mut())?;
        Ok(state)
    }
}

/// SGD momentum buffers, aligned with the classifier's canonical parameter
/// order.
pub struct SgdState {
    velocities: Vec<Tensor>,
}

impl SgdState {
    pub fn new(classifier: &Classifier) -> Self {
        SgdState { velocities: classifier.params().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }
}

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: u64,
    pub report: LossReport,
    pub xi: f64,
    pub classifier_lr: f64,
    pub generator_lr: f64,
    pub wall_clock_s: f64,
}

pub struct ClsStepLosses {
    pub amce: f64,
    pub mce: f64,
    pub ace: f64,
    pub total: f64,
}

pub struct GenStepLosses {
    pub amce_w: f64,
    pub amce_teacher: f64,
    pub cosine: f64,
    pub total: f64,
    /// Euclidean norm of the ascent gradient; absent on eval-only passes.
    pub grad_norm: Option<f64>,
}

/// Forward-only products of the generator for one batch.
pub struct GeneratedBatch {
    /// `[K, C, H, W]` mixed images.
    pub x_mix: Tensor,
    /// Per-set `[N, H, W]` mask stacks.
    pub masks: Vec<Tensor>,
    /// Per-source encoder maps `[Cz, h, w]`, aligned with the set batch.
    pub features: Vec<Tensor>,
}

pub struct Trainer {
    pub state: ModelState,
    pub config: TrainConfig,
    opt: SgdState,
    weights: LossWeights,
    schedule: XiSchedule,
    classes: usize,
    current_lr: f64,
    skips: usize,
    rng: ChaCha20Rng,
}

impl Trainer {
    /// `train_len` fixes the EMA schedule length: one step per batch over
    /// all epochs.
    pub fn new(config: TrainConfig, descriptor: ArchDescriptor, train_len: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let mut resolved = config;
        resolved.resolve();
        let weights = LossWeights::new(resolved.alpha, resolved.beta)?;
        let mut rng = ChaCha20Rng::seed_from_u64(resolved.seed);
        let state = ModelState::init(&descriptor, &mut rng)?;
        let batches_per_epoch = train_len.div_ceil(resolved.batch_size);
        let total_steps = (resolved.epochs * batches_per_epoch) as u64;
        let schedule = XiSchedule::new(resolved.xi_start, total_steps);
        let opt = SgdState::new(&state.classifier);
        let current_lr = resolved.classifier_lr;
        let classes = descriptor.classes;
        Ok(Trainer { state, config: resolved, opt, weights, schedule, classes, current_lr, skips: 0, rng })
    }

    pub fn schedule(&self) -> XiSchedule {
        self.schedule
    }

    /// Cosine-annealed classifier rate for this epoch; the generator rate
    /// stays fixed.
    pub fn set_epoch(&mut self, epoch: usize) {
        let frac = epoch as f64 / self.config.epochs as f64;
        self.current_lr =
            self.config.classifier_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    }

    /// Runs the generator forward over every set of a batch, off any
    /// gradient path.
    pub fn generate_mixes(&self, batch: &SetBatch) -> Result<GeneratedBatch, TrainError> {
        let l = self.state.feature_stage();
        let mut tape = Tape::new();
        let enc_vars = self.state.encoder.mount(&mut tape, false);
        let theta = self.state.generator.mount(&mut tape, false);
        let sources = tape.leaf(batch.sources.clone());
        let z = enc_vars.features(&mut tape, sources, l, BnMode::Running, &mut Vec::new())?;
        let mut mixes = Vec::with_capacity(batch.k);
        let mut masks = Vec::with_capacity(batch.k);
        for k in 0..batch.k {
            let mut feats = Vec::with_capacity(batch.n);
            let mut imgs = Vec::with_capacity(batch.n);
            for n in 0..batch.n {
                feats.push(tape.select0(z, k * batch.n + n)?);
                imgs.push(tape.select0(sources, k * batch.n + n)?);
            }
            let ratios =
                &batch.source_weights.data()[k * batch.n..(k + 1) * batch.n];
            let g = generate_from_features(&mut tape, &feats, &imgs, ratios, &theta)?;
            mixes.push(tape.value(g.x_mix).clone());
            masks.push(tape.value(g.masks).clone());
        }
        let features =
            (0..batch.k * batch.n).map(|i| tape.value(z).index0(i)).collect();
        Ok(GeneratedBatch { x_mix: crate::model::stack_images(&mixes)?, masks, features })
    }

    fn classifier_pass(
        &mut self,
        batch: &SetBatch,
        x_mix: &Tensor,
        apply: bool,
    ) -> Result<ClsStepLosses, TrainError> {
        let mut tape = Tape::new();
        let cls = self.state.classifier.mount(&mut tape, apply);
        let mut pending = Vec::new();
        let x_mix_var = tape.leaf(x_mix.clone());
        let amce =
            amce_loss(&mut tape, &cls, x_mix_var, &batch.mixed_targets, BnMode::Batch, &mut pending)?;
        let mce = mce_loss(&mut tape, &cls, batch, BnMode::Batch, &mut pending)?;
        let ace = ace_loss(&mut tape, &cls, batch, BnMode::Batch, &mut pending)?;
        let total = classifier_objective(&mut tape, amce, mce, ace, self.weights.alpha)?;
        let losses = ClsStepLosses {
            amce: tape.value(amce).item(),
            mce: tape.value(mce).item(),
            ace: tape.value(ace).item(),
            total: tape.value(total).item(),
        };
        if !losses.total.is_finite() {
            return Err(TrainError::NonFinite("classifier objective".into()));
        }
        if apply {
            tape.backward(total)?;
            let grads = collect_grads(&tape, &cls.param_vars(), "classifier gradient")?;
            apply_sgd(
                &mut self.state.classifier.params_mut(),
                &mut self.opt.velocities,
                &grads,
                self.current_lr,
                self.config.momentum,
                self.config.weight_decay,
            );
            self.state.classifier.backbone.commit_bn(&pending)?;
        }
        Ok(losses)
    }

    /// One descent step on the classifier parameters. The generator,
    /// teacher, and encoder are untouched; batch-norm running statistics of
    /// the classifier are updated.
    pub fn classifier_step(&mut self, batch: &SetBatch, x_mix: &Tensor) -> Result<ClsStepLosses, TrainError> {
        self.classifier_pass(batch, x_mix, true)
    }

    /// Evaluates the classifier objective without updating anything.
    pub fn classifier_eval(&mut self, batch: &SetBatch, x_mix: &Tensor) -> Result<ClsStepLosses, TrainError> {
        self.classifier_pass(batch, x_mix, false)
    }

    fn generator_pass(
        &mut self,
        batch: &SetBatch,
        generated: &GeneratedBatch,
        teacher_feats: &Tensor,
        apply: bool,
    ) -> Result<GenStepLosses, TrainError> {
        let mut tape = Tape::new();
        let theta = self.state.generator.mount(&mut tape, apply);
        let cls = self.state.classifier.mount(&mut tape, false);
        let teacher = self.state.teacher.mount(&mut tape, false);
        let sources = tape.leaf(batch.sources.clone());
        let mut mix_rows = Vec::with_capacity(batch.k);
        for k in 0..batch.k {
            let mut feats = Vec::with_capacity(batch.n);
            let mut imgs = Vec::with_capacity(batch.n);
            for n in 0..batch.n {
                let idx = k * batch.n + n;
                feats.push(tape.leaf(generated.features[idx].clone()));
                imgs.push(tape.select0(sources, idx)?);
            }
            let ratios = &batch.source_weights.data()[k * batch.n..(k + 1) * batch.n];
            let g = generate_from_features(&mut tape, &feats, &imgs, ratios, &theta)?;
            let s = tape.shape_of(g.x_mix).to_vec();
            mix_rows.push(tape.reshape(g.x_mix, &[1, s[0], s[1], s[2]])?);
        }
        let x_mix = tape.concat(&mix_rows, 0)?;
        // batch statistics match what the classifier step optimizes, but
        // nothing is committed here
        let amce_w = amce_loss(
            &mut tape,
            &cls,
            x_mix,
            &batch.mixed_targets,
            BnMode::Batch,
            &mut Vec::new(),
        )?;
        // one teacher forward feeds both regularizers
        let f_mix = teacher.pooled_features(&mut tape, x_mix, BnMode::Running, &mut Vec::new())?;
        let teacher_logits = tape.linear(f_mix, teacher.head_w, teacher.head_b)?;
        let teacher_ce = tape.cross_entropy_soft(teacher_logits, &batch.mixed_targets)?;
        let amce_teacher = tape.mean(teacher_ce)?;
        let cosine = cosine_loss_from_features(&mut tape, f_mix, teacher_feats, batch)?;
        let total = generator_objective(
            &mut tape,
            amce_w,
            amce_teacher,
            cosine,
            self.weights.beta,
            self.config.cosine_sign,
        )?;
        let mut losses = GenStepLosses {
            amce_w: tape.value(amce_w).item(),
            amce_teacher: tape.value(amce_teacher).item(),
            cosine: tape.value(cosine).item(),
            total: tape.value(total).item(),
            grad_norm: None,
        };
        if !losses.total.is_finite() {
            return Err(TrainError::NonFinite("generator objective".into()));
        }
        if apply {
            tape.backward(total)?;
            let grads = collect_grads(&tape, &theta.param_vars(), "generator gradient")?;
            losses.grad_norm = Some(
                grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt(),
            );
            let rate = self.config.generator_lr_value();
            for (param, grad) in self.state.generator.params_mut().into_iter().zip(&grads) {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p += rate * g;
                }
            }
        }
        Ok(losses)
    }

    /// One ascent step on the generator parameters. The classifier, teacher,
    /// and encoder (including all running statistics) are untouched.
    pub fn generator_step(
        &mut self,
        batch: &SetBatch,
        generated: &GeneratedBatch,
        teacher_feats: &Tensor,
    ) -> Result<GenStepLosses, TrainError> {
        self.generator_pass(batch, generated, teacher_feats, true)
    }

    /// Evaluates the generator objective without updating anything, for
    /// reporting when T2 = 0.
    pub fn generator_eval(
        &mut self,
        batch: &SetBatch,
        generated: &GeneratedBatch,
        teacher_feats: &Tensor,
    ) -> Result<GenStepLosses, TrainError> {
        self.generator_pass(batch, generated, teacher_feats, false)
    }

    /// Plain cross-entropy descent step.
    pub fn vanilla_step(&mut self, images: &[Tensor], labels: &[usize]) -> Result<f64, TrainError> {
        let targets = one_hot_rows(labels, self.classes);
        self.ce_step(images, &targets)
    }

    /// Two-image linear mixup step: one Beta-drawn ratio per batch, paired
    /// against a seeded shuffle of the batch.
    pub fn input_mixup_step(&mut self, images: &[Tensor], labels: &[usize]) -> Result<f64, TrainError> {
        if self.config.images_per_set != 2 {
            return Err(TrainError::Config(ConfigError {
                field: "train.images_per_set".into(),
                message: format!("input-mixup requires exactly 2, got {}", self.config.images_per_set),
            }));
        }
        let ratio = sample_mix_ratios(2, self.config.mix_concentration, &mut self.rng)?[0];
        let mut perm: Vec<usize> = (0..images.len()).collect();
        perm.shuffle(&mut self.rng);
        let mut mixed = Vec::with_capacity(images.len());
        let mut targets = Tensor::zeros(&[images.len(), self.classes]);
        for (i, &j) in perm.iter().enumerate() {
            let a = &images[i];
            let b = &images[j];
            let img = Tensor::from_vec(
                a.data().iter().zip(b.data()).map(|(x, y)| ratio * x + (1.0 - ratio) * y).collect(),
                a.shape(),
            )?;
            mixed.push(img);
            let y = crate::mixblock::mix_labels(
                &[one_hot(labels[i], self.classes), one_hot(labels[j], self.classes)],
                &[ratio, 1.0 - ratio],
            )?;
            let row = &mut targets.data_mut()[i * self.classes..(i + 1) * self.classes];
            row.copy_from_slice(y.data());
        }
        self.ce_step(&mixed, &targets)
    }

    fn ce_step(&mut self, images: &[Tensor], targets: &Tensor) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let cls = self.state.classifier.mount(&mut tape, true);
        let mut pending = Vec::new();
        let x = tape.leaf(crate::model::stack_images(images)?);
        let logits = cls.forward(&mut tape, x, BnMode::Batch, &mut pending)?;
        let ce = tape.cross_entropy_soft(logits, targets)?;
        let loss = tape.mean(ce)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite("cross entropy".into()));
        }
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &cls.param_vars(), "classifier gradient")?;
        apply_sgd(
            &mut self.state.classifier.params_mut(),
            &mut self.opt.velocities,
            &grads,
            self.current_lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        self.state.classifier.backbone.commit_bn(&pending)?;
        Ok(value)
    }

    /// Folds the classifier into both EMA shadows at the schedule's current
    /// momentum, returning the momentum used. Runs once per batch at the
    /// end of the inner loops.
    pub fn ema_point(&mut self) -> Result<f64, TrainError> {
        let xi = self.schedule.xi_at(self.state.step);
        let ModelState { classifier, teacher, encoder, .. } = &mut self.state;
        ema_update_classifier(teacher, classifier, xi)?;
        ema_update_encoder(encoder, classifier, xi)?;
        Ok(xi)
    }

    fn train_batch(&mut self, epoch: usize, batch: &TrainBatch) -> Result<Option<TrainLogRow>, TrainError> {
        let start = Instant::now();
        let report = match self.config.mode {
            TrainMode::Vanilla => {
                let ce = self.vanilla_step(&batch.images, &batch.labels)?;
                LossReport {
                    amce: 0.0,
                    mce: 0.0,
                    ace: ce,
                    amce_teacher: 0.0,
                    cosine: 0.0,
                    classifier_total: ce,
                    generator_total: 0.0,
                }
            }
            TrainMode::InputMixup => {
                let ce = self.input_mixup_step(&batch.images, &batch.labels)?;
                LossReport {
                    amce: ce,
                    mce: 0.0,
                    ace: 0.0,
                    amce_teacher: 0.0,
                    cosine: 0.0,
                    classifier_total: ce,
                    generator_total: 0.0,
                }
            }
            TrainMode::Adversarial => {
                if batch.sets.is_empty() {
                    // a trailing batch smaller than one set trains nothing
                    return Ok(None);
                }
                let set_batch = SetBatch::new(&batch.sets)?;
                let generated = self.generate_mixes(&set_batch)?;
                let mut cls_losses = None;
                for _ in 0..self.config.classifier_steps {
                    cls_losses = Some(self.classifier_step(&set_batch, &generated.x_mix)?);
                }
                let teacher_feats = teacher_source_features(&self.state.teacher, &set_batch)?;
                let mut gen_losses = None;
                for _ in 0..self.config.generator_steps {
                    gen_losses = Some(self.generator_step(&set_batch, &generated, &teacher_feats)?);
                }
                let gen_losses = match gen_losses {
                    Some(g) => g,
                    None => self.generator_eval(&set_batch, &generated, &teacher_feats)?,
                };
                let cls_losses = cls_losses.expect("classifier_steps >= 1");
                LossReport::from_parts(
                    cls_losses.amce,
                    cls_losses.mce,
                    cls_losses.ace,
                    gen_losses.amce_teacher,
                    gen_losses.cosine,
                    self.weights,
                    self.config.cosine_sign,
                )
            }
        };
        let xi = self.ema_point()?;
        let row = TrainLogRow {
            epoch,
            step: self.state.step,
            report,
            xi,
            classifier_lr: self.current_lr,
            generator_lr: self.config.generator_lr_value(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        self.state.step += 1;
        Ok(Some(row))
    }

    /// Runs one epoch over seeded batches. Failed batches are skipped up to
    /// the configured budget, then training aborts.
    pub fn train_epoch(&mut self, data: &[LabeledImage], epoch: usize) -> Result<Vec<TrainLogRow>, TrainError> {
        self.set_epoch(epoch);
        let settings = self.config.batch_settings(self.classes);
        let mut rows = Vec::new();
        let batches: Vec<TrainBatch> = epoch_batches(data, &settings, epoch as u64)?.collect();
        for batch in batches {
            match self.train_batch(epoch, &batch) {
                Ok(Some(row)) => rows.push(row),
                Ok(None) => {}
                Err(e @ (TrainError::NonFinite(_) | TrainError::Diff(_))) => {
                    self.skips += 1;
                    eprintln!("skipping batch after error: {e}");
                    if self.skips > self.config.max_skips {
                        return Err(TrainError::Diverged { skipped: self.skips });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(rows)
    }
}

fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[label] = 1.0;
    t
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

fn collect_grads(tape: &Tape, vars: &[Var], what: &str) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(vars.len());
    for &v in vars {
        let g = tape.grad_tensor(v);
        if !g.is_finite() {
            return Err(TrainError::NonFinite(what.to_string()));
        }
        out.push(g);
    }
    Ok(out)
}

fn apply_sgd(
    params: &mut [&mut Tensor],
    velocities: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((param, vel), grad) in params.iter_mut().zip(velocities).zip(grads) {
        for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
            *v = momentum * *v + (*g + weight_decay * *p);
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, DataConfig};
    use crate::model::ModelConfig;

    pub(crate) fn desk_setup(seed: u64, mode: TrainMode) -> (Trainer, Vec<LabeledImage>, Vec<LabeledImage>) {
        let data_cfg = DataConfig { train_size: 60, test_size: 30, seed, ..DataConfig::default() };
        let spec = data_cfg.validate().unwrap();
        let (train, test) = make_synthetic(&spec).unwrap();
        let descriptor = ModelConfig { widths: vec![4, 4, 6, 8], blocks_per_stage: 1, feature_stage: 3 }
            .validate(spec.channels, spec.height, spec.width, spec.num_classes)
            .unwrap();
        let config = TrainConfig {
            batch_size: 12,
            images_per_set: 3,
            epochs: 3,
            seed,
            mode,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(config, descriptor, train.len()).unwrap();
        (trainer, train, test)
    }

    fn first_set_batch(trainer: &Trainer, data: &[LabeledImage]) -> SetBatch {
        let settings = trainer.config.batch_settings(trainer.classes);
        let batch = epoch_batches(data, &settings, 0).unwrap().next().unwrap();
        SetBatch::new(&batch.sets).unwrap()
    }

    #[test]
    fn teacher_and_encoder_start_bit_identical() {
        let (trainer, _, _) = desk_setup(0, TrainMode::Adversarial);
        for (a, b) in trainer.state.teacher.params().iter().zip(trainer.state.classifier.params()) {
            assert!(a.bits_eq(b));
        }
        let prefix = trainer.state.classifier.backbone.prefix_layers(3);
        for (enc, src) in trainer.state.encoder.conv_layers().iter().zip(prefix) {
            assert!(enc.weight.bits_eq(&src.weight));
            assert!(enc.run_mean.bits_eq(&src.run_mean));
        }
    }

    #[test]
    fn classifier_step_leaves_generator_teacher_encoder_untouched() {
        let (mut trainer, train, _) = desk_setup(1, TrainMode::Adversarial);
        let batch = first_set_batch(&trainer, &train);
        let generated = trainer.generate_mixes(&batch).unwrap();
        let theta_before: Vec<Tensor> = trainer.state.generator.params().into_iter().cloned().collect();
        let teacher_before: Vec<Tensor> = trainer.state.teacher.params().into_iter().cloned().collect();
        let encoder_before: Vec<Tensor> = trainer.state.encoder.params().into_iter().cloned().collect();
        let cls_before: Vec<Tensor> = trainer.state.classifier.params().into_iter().cloned().collect();

        trainer.classifier_step(&batch, &generated.x_mix).unwrap();

        for (b, a) in theta_before.iter().zip(trainer.state.generator.params()) {
            assert!(b.bits_eq(a));
        }
        for (b, a) in teacher_before.iter().zip(trainer.state.teacher.params()) {
            assert!(b.bits_eq(a));
        }
        for (b, a) in encoder_before.iter().zip(trainer.state.encoder.params()) {
            assert!(b.bits_eq(a));
        }
        // and the classifier itself did change
        assert!(cls_before.iter().zip(trainer.state.classifier.params()).any(|(b, a)| !b.bits_eq(a)));
    }

    #[test]
    fn generator_step_leaves_classifier_teacher_encoder_untouched() {
        let (mut trainer, train, _) = desk_setup(2, TrainMode::Adversarial);
        let batch = first_set_batch(&trainer, &train);
        let generated = trainer.generate_mixes(&batch).unwrap();
        let teacher_feats = teacher_source_features(&trainer.state.teacher, &batch).unwrap();

        let cls_before: Vec<Tensor> = trainer.state.classifier.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let teacher_before: Vec<Tensor> = trainer.state.teacher.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let encoder_before: Vec<Tensor> = trainer.state.encoder.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let theta_before: Vec<Tensor> = trainer.state.generator.params().into_iter().cloned().collect();

        trainer.generator_step(&batch, &generated, &teacher_feats).unwrap();

        // bitwise, including batch-norm running statistics
        for (b, (_, a)) in cls_before.iter().zip(trainer.state.classifier.named_tensors()) {
            assert!(b.bits_eq(a));
        }
        for (b, (_, a)) in teacher_before.iter().zip(trainer.state.teacher.named_tensors()) {
            assert!(b.bits_eq(a));
        }
        for (b, (_, a)) in encoder_before.iter().zip(trainer.state.encoder.named_tensors()) {
            assert!(b.bits_eq(a));
        }
        assert!(theta_before.iter().zip(trainer.state.generator.params()).any(|(b, a)| !b.bits_eq(a)));
    }

    #[test]
    fn zero_rates_freeze_parameters() {
        let (mut trainer, train, _) = desk_setup(3, TrainMode::Adversarial);
        trainer.current_lr = 0.0;
        trainer.config.weight_decay = 0.0;
        trainer.config.generator_lr = Some(f64::MIN_POSITIVE);
        let batch = first_set_batch(&trainer, &train);
        let generated = trainer.generate_mixes(&batch).unwrap();
        let cls_before: Vec<Tensor> = trainer.state.classifier.params().into_iter().cloned().collect();
        trainer.classifier_step(&batch, &generated.x_mix).unwrap();
        for (b, a) in cls_before.iter().zip(trainer.state.classifier.params()) {
            assert!(b.bits_eq(a));
        }
    }

    #[test]
    fn skipping_generator_steps_keeps_theta_for_whole_epoch() {
        let (mut trainer, train, _) = desk_setup(4, TrainMode::Adversarial);
        trainer.config.generator_steps = 0;
        let theta_before: Vec<Tensor> = trainer.state.generator.params().into_iter().cloned().collect();
        trainer.train_epoch(&train, 0).unwrap();
        for (b, a) in theta_before.iter().zip(trainer.state.generator.params()) {
            assert!(b.bits_eq(a));
        }
    }

    #[test]
    fn vanilla_mode_never_touches_generator() {
        let (mut trainer, train, _) = desk_setup(5, TrainMode::Vanilla);
        let theta_before: Vec<Tensor> = trainer.state.generator.params().into_iter().cloned().collect();
        let rows = trainer.train_epoch(&train, 0).unwrap();
        assert_eq!(rows.len(), 5);
        for (b, a) in theta_before.iter().zip(trainer.state.generator.params()) {
            assert!(b.bits_eq(a));
        }
        assert!(rows.iter().all(|r| r.report.generator_total == 0.0));
    }

    #[test]
    fn input_mixup_mode_requires_two_per_set() {
        let data_cfg = DataConfig { train_size: 20, test_size: 10, ..DataConfig::default() };
        let spec = data_cfg.validate().unwrap();
        let descriptor = ModelConfig::default()
            .validate(spec.channels, spec.height, spec.width, spec.num_classes)
            .unwrap();
        let config =
            TrainConfig { mode: TrainMode::InputMixup, images_per_set: 3, ..TrainConfig::default() };
        assert!(Trainer::new(config, descriptor, 20).is_err());
    }

    #[test]
    fn input_mixup_trains_and_logs() {
        let data_cfg = DataConfig { train_size: 24, test_size: 10, seed: 6, ..DataConfig::default() };
        let spec = data_cfg.validate().unwrap();
        let (train, _) = make_synthetic(&spec).unwrap();
        let descriptor = ModelConfig { widths: vec![4, 4, 6, 8], blocks_per_stage: 1, feature_stage: 3 }
            .validate(spec.channels, spec.height, spec.width, spec.num_classes)
            .unwrap();
        let config = TrainConfig {
            mode: TrainMode::InputMixup,
            images_per_set: 2,
            batch_size: 12,
            epochs: 2,
            seed: 6,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config, descriptor, train.len()).unwrap();
        let rows = trainer.train_epoch(&train, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.report.classifier_total.is_finite()));
    }

    #[test]
    fn ema_point_is_convex_and_only_touches_shadows() {
        let (mut trainer, train, _) = desk_setup(7, TrainMode::Adversarial);
        let batch = first_set_batch(&trainer, &train);
        let generated = trainer.generate_mixes(&batch).unwrap();
        trainer.classifier_step(&batch, &generated.x_mix).unwrap();

        let teacher_before: Vec<Tensor> = trainer.state.teacher.params().into_iter().cloned().collect();
        let cls_now: Vec<Tensor> = trainer.state.classifier.params().into_iter().cloned().collect();
        let xi = trainer.ema_point().unwrap();
        assert!((trainer.schedule.xi_at(0) - xi).abs() < 1e-15);
        for ((before, after), src) in
            teacher_before.iter().zip(trainer.state.teacher.params()).zip(&cls_now)
        {
            for ((b, a), s) in before.data().iter().zip(after.data()).zip(src.data()) {
                let expect = xi * b + (1.0 - xi) * s;
                assert_eq!(a.to_bits(), expect.to_bits());
                assert!(*a >= b.min(*s) - 1e-15 && *a <= b.max(*s) + 1e-15);
            }
        }
    }

    #[test]
    fn full_runs_are_bitwise_reproducible() {
        let run = || {
            let (mut trainer, train, _) = desk_setup(8, TrainMode::Adversarial);
            for epoch in 0..2 {
                trainer.train_epoch(&train, epoch).unwrap();
            }
            let tensors: Vec<Tensor> = trainer
                .state
                .classifier
                .named_tensors()
                .into_iter()
                .chain(trainer.state.generator.named_tensors())
                .map(|(_, t)| t.clone())
                .collect();
            tensors
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let (mut trainer, train, _) = desk_setup(9, TrainMode::Adversarial);
        trainer.train_epoch(&train, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        trainer.state.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(loaded.step, trainer.state.step);
        for ((_, a), (_, b)) in loaded.classifier.named_tensors().iter().zip(trainer.state.classifier.named_tensors()) {
            assert!(a.bits_eq(b));
        }
        for ((_, a), (_, b)) in loaded.generator.named_tensors().iter().zip(trainer.state.generator.named_tensors()) {
            assert!(a.bits_eq(b));
        }
        for ((_, a), (_, b)) in loaded.encoder.named_tensors().iter().zip(trainer.state.encoder.named_tensors()) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn config_validation_names_offending_field() {
        let bad = TrainConfig { alpha: 1.5, ..TrainConfig::default() };
        assert_eq!(bad.validate().unwrap_err().field, "train.alpha");
        let bad = TrainConfig { classifier_steps: 0, ..TrainConfig::default() };
        assert_eq!(bad.validate().unwrap_err().field, "train.classifier_steps");
        let bad = TrainConfig { sets_per_batch: Some(999), ..TrainConfig::default() };
        assert_eq!(bad.validate().unwrap_err().field, "train.sets_per_batch");
    }
}
