//! Evaluation: top-k accuracy, expected calibration error, single-step
//! white-box attacks, and patch-occlusion robustness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::LabeledImage;
use crate::diffmath::{DiffError, Tape, Var};
use crate::model::{stack_images, Classifier};
use crate::tensor::Tensor;

/// Per-sample class probabilities with ground-truth labels.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self, DiffError> {
        if probs.len() != labels.len() {
            return Err(DiffError::Invalid {
                op: "prediction_set",
                detail: format!("{} probability rows vs {} labels", probs.len(), labels.len()),
            });
        }
        let classes = probs.first().map_or(0, |p| p.len());
        for (i, row) in probs.iter().enumerate() {
            if row.len() != classes {
                return Err(DiffError::Invalid {
                    op: "prediction_set",
                    detail: format!("row {i} has {} entries, expected {classes}", row.len()),
                });
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| *p < -1e-9) || (sum - 1.0).abs() > 1e-6 {
                return Err(DiffError::Invalid {
                    op: "prediction_set",
                    detail: format!("row {i} is not on the simplex (sum {sum})"),
                });
            }
            if labels[i] >= classes {
                return Err(DiffError::Invalid {
                    op: "prediction_set",
                    detail: format!("label {} out of range for {classes} classes", labels[i]),
                });
            }
        }
        Ok(PredictionSet { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.probs.first().map_or(0, |p| p.len())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EceConfig {
    /// Equal-width confidence bins over [0, 1].
    pub bins: usize,
}

impl Default for EceConfig {
    fn default() -> Self {
        EceConfig { bins: 15 }
    }
}

/// Fraction of samples whose true label ranks among the k most probable
/// classes. Probability ties resolve toward the lower class index.
pub fn top_k_accuracy(preds: &PredictionSet, k: usize) -> Result<f64, DiffError> {
    if preds.is_empty() {
        return Err(DiffError::Invalid { op: "top_k_accuracy", detail: "empty prediction set".into() });
    }
    if k == 0 || k > preds.classes() {
        return Err(DiffError::Invalid {
            op: "top_k_accuracy",
            detail: format!("k {} outside 1..={}", k, preds.classes()),
        });
    }
    let mut correct = 0usize;
    for (row, &label) in preds.probs.iter().zip(&preds.labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order[..k].contains(&label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / preds.len() as f64)
}

/// Expected calibration error: confidence is the max probability, bins are
/// equal width, and the result is the sample-weighted mean gap between
/// per-bin accuracy and per-bin mean confidence.
pub fn ece(preds: &PredictionSet, config: &EceConfig) -> Result<f64, DiffError> {
    if preds.is_empty() {
        return Err(DiffError::Invalid { op: "ece", detail: "empty prediction set".into() });
    }
    if config.bins == 0 {
        return Err(DiffError::Invalid { op: "ece", detail: "need at least one bin".into() });
    }
    let mut count = vec![0usize; config.bins];
    let mut conf_sum = vec![0.0; config.bins];
    let mut hit_sum = vec![0.0; config.bins];
    for (row, &label) in preds.probs.iter().zip(&preds.labels) {
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        let conf = row[best];
        let bin = ((conf * config.bins as f64) as usize).min(config.bins - 1);
        count[bin] += 1;
        conf_sum[bin] += conf;
        if best == label {
            hit_sum[bin] += 1.0;
        }
    }
    let total = preds.len() as f64;
    let mut e = 0.0;
    for b in 0..config.bins {
        if count[b] == 0 {
            continue;
        }
        let n = count[b] as f64;
        e += (n / total) * (hit_sum[b] / n - conf_sum[b] / n).abs();
    }
    Ok(e)
}

/// Runs a batch of images through a logits function.
pub type ForwardFn<'a> = dyn Fn(&mut Tape, Var) -> Result<Var, DiffError> + 'a;

/// Inference-mode forward pass of a trained classifier, usable with
/// [`fgsm_attack`].
pub fn classifier_forward(cls: &Classifier) -> impl Fn(&mut Tape, Var) -> Result<Var, DiffError> + '_ {
    |tape, x| {
        let vars = cls.mount(tape, false);
        vars.forward(tape, x, crate::diffmath::BnMode::Running, &mut Vec::new())
    }
}

/// Single-step sign attack: `x + eps * sign(grad_x ce)`, clamped to
/// `[0, 1]`. The attack objective is the clean cross entropy on the true
/// labels.
pub fn fgsm_attack<F>(
    forward: F,
    images: &[Tensor],
    labels: &[usize],
    classes: usize,
    eps: f64,
) -> Result<Vec<Tensor>, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(DiffError::Invalid { op: "fgsm_attack", detail: format!("eps {eps} negative") });
    }
    if images.len() != labels.len() || images.is_empty() {
        return Err(DiffError::Invalid {
            op: "fgsm_attack",
            detail: format!("{} images vs {} labels", images.len(), labels.len()),
        });
    }
    for img in images {
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DiffError::Invalid {
                op: "fgsm_attack",
                detail: "image pixels outside [0, 1]".into(),
            });
        }
    }
    let mut tape = Tape::new();
    let x = tape.param(stack_images(images)?);
    let logits = forward(&mut tape, x)?;
    let mut targets = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        targets.data_mut()[i * classes + l] = 1.0;
    }
    let ce = tape.cross_entropy_soft(logits, &targets)?;
    let loss = tape.mean(ce)?;
    tape.backward(loss)?;
    let grad = tape.grad_tensor(x);
    let numel = images[0].numel();
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut adv = img.clone();
        for (j, p) in adv.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i * numel + j];
            *p = (*p + eps * g.signum() * if g == 0.0 { 0.0 } else { 1.0 }).clamp(0.0, 1.0);
        }
        out.push(adv);
    }
    Ok(out)
}

/// Zeroes out `round(ratio * cells)` grid cells of the image. The grid uses
/// `patch`-sized cells clipped at the image boundary; which cells go first
/// is a seeded per-image shuffle, so masked sets are nested across ratios.
pub fn occluded_image(
    img: &Tensor,
    patch: (usize, usize),
    ratio: f64,
    seed: u64,
    index: u64,
) -> Result<(Tensor, usize), DiffError> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(DiffError::Shape {
            op: "occlusion",
            detail: format!("expected [C, H, W], got {:?}", s),
        });
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DiffError::Invalid { op: "occlusion", detail: format!("ratio {ratio} outside [0, 1]") });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 {
        return Err(DiffError::Invalid { op: "occlusion", detail: "patch must be nonempty".into() });
    }
    let cells_y = h.div_ceil(ph);
    let cells_x = w.div_ceil(pw);
    let cells = cells_y * cells_x;
    let masked = ((ratio * cells as f64).round() as usize).min(cells);
    let mut order: Vec<usize> = (0..cells).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let mut out = img.clone();
    for &cell in order.iter().take(masked) {
        let cy = cell / cells_x;
        let cx = cell % cells_x;
        for ci in 0..c {
            for y in cy * ph..((cy + 1) * ph).min(h) {
                for x in cx * pw..((cx + 1) * pw).min(w) {
                    out.data_mut()[(ci * h + y) * w + x] = 0.0;
                }
            }
        }
    }
    Ok((out, masked))
}

/// Inference-mode predictions over a dataset, in sample order.
pub fn predict_set(cls: &Classifier, data: &[LabeledImage]) -> Result<PredictionSet, DiffError> {
    let mut probs = Vec::with_capacity(data.len());
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    for chunk in data.chunks(256) {
        let images: Vec<Tensor> = chunk.iter().map(|d| d.pixels.clone()).collect();
        probs.extend(cls.predict_probs(&images)?);
    }
    PredictionSet::new(probs, labels)
}

/// Top-1 accuracy after masking each image at each ratio. The same seed
/// and ratio always mask the same cells.
pub fn occlusion_eval(
    cls: &Classifier,
    data: &[LabeledImage],
    patch: (usize, usize),
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>, DiffError> {
    if data.is_empty() {
        return Err(DiffError::Invalid { op: "occlusion", detail: "empty dataset".into() });
    }
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut masked = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let (img, _) = occluded_image(&item.pixels, patch, ratio, seed, i as u64)?;
            masked.push(LabeledImage { pixels: img, label: item.label });
        }
        let preds = predict_set(cls, &masked)?;
        out.push((ratio, top_k_accuracy(&preds, 1)?));
    }
    Ok(out)
}

/// Top-1 accuracy under the sign attack at the given strength.
pub fn fgsm_accuracy(cls: &Classifier, data: &[LabeledImage], eps: f64) -> Result<f64, DiffError> {
    let mut adv_data = Vec::with_capacity(data.len());
    for chunk in data.chunks(128) {
        let images: Vec<Tensor> = chunk.iter().map(|d| d.pixels.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|d| d.label).collect();
        let adv = fgsm_attack(classifier_forward(cls), &images, &labels, cls.descriptor.classes, eps)?;
        adv_data.extend(
            adv.into_iter().zip(labels).map(|(pixels, label)| LabeledImage { pixels, label }),
        );
    }
    let preds = predict_set(cls, &adv_data)?;
    top_k_accuracy(&preds, 1)
}
