//! Loss terms and the two objectives of the alternating optimization.
//!
//! The classifier descends
//!   `amce(W) + alpha * mce(W) + (1 - alpha) * ace(W)`,
//! the mixup classification objective restricted to its W-dependent terms.
//! The generator ascends
//!   `amce(W) - beta * amce(teacher) + (1 - beta) * cosine`,
//! evaluated with the classifier and teacher frozen so the only gradient
//! path runs through the generated mix. The teacher and cosine terms keep
//! generated samples recognizable while the first term pushes them to be
//! hard for the current classifier.

use serde::{Deserialize, Serialize};

use crate::data::MixBatch;
use crate::diffmath::norm::BnStats;
use crate::diffmath::{BnMode, DiffError, Tape, Var};
use crate::mixblock::mix_labels;
use crate::model::{stack_images, Classifier, ClassifierVars};
use crate::tensor::Tensor;

/// Balance weights of the two objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DiffError> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DiffError::Invalid {
                    op: "loss_weights",
                    detail: format!("{name} {v} outside [0, 1]"),
                });
            }
        }
        Ok(LossWeights { alpha, beta })
    }
}

/// Sign applied to the cosine term of the generator objective. `Equation`
/// adds it under maximization; `Prose` subtracts it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineSign {
    #[default]
    Equation,
    Prose,
}

impl CosineSign {
    pub fn factor(self) -> f64 {
        match self {
            CosineSign::Equation => 1.0,
            CosineSign::Prose => -1.0,
        }
    }
}

/// Per-step loss values, with the totals recomputed from the parts.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub amce: f64,
    pub mce: f64,
    pub ace: f64,
    pub amce_teacher: f64,
    pub cosine: f64,
    pub classifier_total: f64,
    pub generator_total: f64,
}

impl LossReport {
    pub fn from_parts(
        amce: f64,
        mce: f64,
        ace: f64,
        amce_teacher: f64,
        cosine: f64,
        weights: LossWeights,
        sign: CosineSign,
    ) -> Self {
        LossReport {
            amce,
            mce,
            ace,
            amce_teacher,
            cosine,
            classifier_total: compose_classifier_total(amce, mce, ace, weights.alpha),
            generator_total: compose_generator_total(amce, amce_teacher, cosine, weights.beta, sign),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.amce,
            self.mce,
            self.ace,
            self.amce_teacher,
            self.cosine,
            self.classifier_total,
            self.generator_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn compose_classifier_total(amce: f64, mce: f64, ace: f64, alpha: f64) -> f64 {
    amce + alpha * mce + (1.0 - alpha) * ace
}

pub fn compose_generator_total(
    amce_w: f64,
    amce_teacher: f64,
    cosine: f64,
    beta: f64,
    sign: CosineSign,
) -> f64 {
    amce_w - beta * amce_teacher + sign.factor() * (1.0 - beta) * cosine
}

/// K mix sets flattened into batch tensors, plus everything derived from
/// them that does not depend on any model: mixed labels, per-source
/// weights, and the plain linear pixel mixes.
#[derive(Clone, Debug)]
pub struct SetBatch {
    /// `[K*N, C, H, W]`, set-major.
    pub sources: Tensor,
    /// `[K*N, classes]` one-hot rows.
    pub source_targets: Tensor,
    /// `[K*N]` mix ratios, aligned with `sources`.
    pub source_weights: Tensor,
    /// `[K, classes]` mixed label rows.
    pub mixed_targets: Tensor,
    /// `[K, C, H, W]` ratio-weighted pixel mixes.
    pub linear_mixes: Tensor,
    pub k: usize,
    pub n: usize,
}

impl SetBatch {
    pub fn new(sets: &[MixBatch]) -> Result<Self, DiffError> {
        if sets.is_empty() {
            return Err(DiffError::Invalid { op: "set_batch", detail: "no mix sets".into() });
        }
        let n = sets[0].n();
        let mut images = Vec::with_capacity(sets.len() * n);
        let mut target_rows = Vec::new();
        let mut weights = Vec::with_capacity(sets.len() * n);
        let mut mixed_rows = Vec::new();
        let mut linear = Vec::new();
        for set in sets {
            if set.n() != n || set.labels.len() != n || set.ratios.len() != n {
                return Err(DiffError::Invalid {
                    op: "set_batch",
                    detail: "sets disagree on image count".into(),
                });
            }
            let y_mix = mix_labels(&set.labels, &set.ratios)?;
            mixed_rows.extend_from_slice(y_mix.data());
            let mut lin = Tensor::zeros(set.images[0].shape());
            for (img, (&ratio, label)) in
                set.images.iter().zip(set.ratios.iter().zip(set.labels.iter()))
            {
                images.push(img.clone());
                target_rows.extend_from_slice(label.data());
                weights.push(ratio);
                for (acc, &v) in lin.data_mut().iter_mut().zip(img.data()) {
                    *acc += ratio * v;
                }
            }
            linear.push(lin);
        }
        let sources = stack_images(&images)?;
        let classes = sets[0].labels[0].numel();
        let k = sets.len();
        Ok(SetBatch {
            sources,
            source_targets: Tensor::from_vec(target_rows, &[k * n, classes])?,
            source_weights: Tensor::from_vec(weights, &[k * n])?,
            mixed_targets: Tensor::from_vec(mixed_rows, &[k, classes])?,
            linear_mixes: stack_images(&linear)?,
            k,
            n,
        })
    }
}

/// Ratio-weighted cross entropy of the classifier on the source images,
/// averaged over the K sets.
pub fn ace_loss(
    tape: &mut Tape,
    cls: &ClassifierVars,
    batch: &SetBatch,
    mode: BnMode,
    pending: &mut Vec<BnStats>,
) -> Result<Var, DiffError> {
    let x = tape.leaf(batch.sources.clone());
    let logits = cls.forward(tape, x, mode, pending)?;
    let ce = tape.cross_entropy_soft(logits, &batch.source_targets)?;
    let w = tape.leaf(batch.source_weights.clone());
    let weighted = tape.mul(ce, w)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / batch.k as f64)
}

/// Cross entropy of a model on mixed images against soft mixed targets,
/// averaged over rows. Works for the classifier and the teacher alike.
pub fn amce_loss(
    tape: &mut Tape,
    model: &ClassifierVars,
    x_mix: Var,
    targets: &Tensor,
    mode: BnMode,
    pending: &mut Vec<BnStats>,
) -> Result<Var, DiffError> {
    let logits = model.forward(tape, x_mix, mode, pending)?;
    let ce = tape.cross_entropy_soft(logits, targets)?;
    tape.mean(ce)
}

/// Cross entropy of the classifier on the ratio-weighted *linear* pixel
/// mixes against the mixed targets.
pub fn mce_loss(
    tape: &mut Tape,
    cls: &ClassifierVars,
    batch: &SetBatch,
    mode: BnMode,
    pending: &mut Vec<BnStats>,
) -> Result<Var, DiffError> {
    let x = tape.leaf(batch.linear_mixes.clone());
    let logits = cls.forward(tape, x, mode, pending)?;
    let ce = tape.cross_entropy_soft(logits, &batch.mixed_targets)?;
    tape.mean(ce)
}

/// Teacher representations of the source images, pooled: `[K*N, F]`.
/// Computed off any gradient path since the sources are constants.
pub fn teacher_source_features(teacher: &Classifier, batch: &SetBatch) -> Result<Tensor, DiffError> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.sources.clone());
    let vars = teacher.mount(&mut tape, false);
    let f = vars.pooled_features(&mut tape, x, BnMode::Running, &mut Vec::new())?;
    Ok(tape.value(f).clone())
}

/// Ratio-weighted cosine similarity between the teacher representation of
/// each mixed image and the teacher representations of its sources,
/// averaged over the K sets.
pub fn cosine_loss(
    tape: &mut Tape,
    teacher: &ClassifierVars,
    x_mix: Var,
    source_feats: &Tensor,
    batch: &SetBatch,
) -> Result<Var, DiffError> {
    let f_mix = teacher.pooled_features(tape, x_mix, BnMode::Running, &mut Vec::new())?;
    cosine_loss_from_features(tape, f_mix, source_feats, batch)
}

/// [`cosine_loss`] with the teacher representation of the mixed images
/// already on the tape, so it can be shared with the teacher's cross
/// entropy.
pub fn cosine_loss_from_features(
    tape: &mut Tape,
    f_mix: Var,
    source_feats: &Tensor,
    batch: &SetBatch,
) -> Result<Var, DiffError> {
    let fs = source_feats.shape();
    if fs.len() != 2 || fs[0] != batch.k * batch.n {
        return Err(DiffError::Shape {
            op: "cosine_loss",
            detail: format!("source features {:?} vs {} sources", fs, batch.k * batch.n),
        });
    }
    let feat_dim = fs[1];
    let mut total: Option<Var> = None;
    for k in 0..batch.k {
        let fk = tape.select0(f_mix, k)?;
        for n in 0..batch.n {
            let idx = k * batch.n + n;
            let row = Tensor::from_vec(
                source_feats.data()[idx * feat_dim..(idx + 1) * feat_dim].to_vec(),
                &[feat_dim],
            )?;
            let src = tape.leaf(row);
            let c = tape.cosine_similarity(fk, src)?;
            let weighted = tape.scale(c, batch.source_weights.data()[idx])?;
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
    }
    tape.scale(total.expect("k >= 1"), 1.0 / batch.k as f64)
}

/// `amce + alpha * mce + (1 - alpha) * ace` on the tape.
pub fn classifier_objective(
    tape: &mut Tape,
    amce: Var,
    mce: Var,
    ace: Var,
    alpha: f64,
) -> Result<Var, DiffError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DiffError::Invalid {
            op: "classifier_objective",
            detail: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    let weighted_mce = tape.scale(mce, alpha)?;
    let weighted_ace = tape.scale(ace, 1.0 - alpha)?;
    let s = tape.add(amce, weighted_mce)?;
    tape.add(s, weighted_ace)
}

/// `amce(W) - beta * amce(teacher) + sign * (1 - beta) * cosine` on the
/// tape. The trainer ascends this; nothing is negated anywhere else.
pub fn generator_objective(
    tape: &mut Tape,
    amce_w: Var,
    amce_teacher: Var,
    cosine: Var,
    beta: f64,
    sign: CosineSign,
) -> Result<Var, DiffError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(DiffError::Invalid {
            op: "generator_objective",
            detail: format!("beta {beta} outside [0, 1]"),
        });
    }
    let teacher_term = tape.scale(amce_teacher, -beta)?;
    let cosine_term = tape.scale(cosine, sign.factor() * (1.0 - beta))?;
    let s = tape.add(amce_w, teacher_term)?;
    tape.add(s, cosine_term)
}
