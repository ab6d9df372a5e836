//! Exponential moving averages and their momentum schedule.

use super::{Backbone, Classifier};
use crate::diffmath::DiffError;
use crate::tensor::Tensor;

/// `target <- xi * target + (1 - xi) * source`, elementwise.
pub fn ema_tensors(target: &mut Tensor, source: &Tensor, xi: f64) -> Result<(), DiffError> {
    if target.shape() != source.shape() {
        return Err(DiffError::Shape {
            op: "ema_update",
            detail: format!("{:?} vs {:?}", target.shape(), source.shape()),
        });
    }
    if !(0.0..=1.0).contains(&xi) {
        return Err(DiffError::Invalid { op: "ema_update", detail: format!("xi {} outside [0, 1]", xi) });
    }
    for (t, s) in target.data_mut().iter_mut().zip(source.data()) {
        *t = xi * *t + (1.0 - xi) * s;
    }
    Ok(())
}

/// EMA over all learnable parameters; batch-norm running statistics are
/// copied from the source since they are already moving averages.
pub fn ema_update_backbone(target: &mut Backbone, source: &Backbone, xi: f64) -> Result<(), DiffError> {
    {
        let mut dst = target.params_mut();
        let src = source.params();
        if dst.len() != src.len() {
            return Err(DiffError::Shape {
                op: "ema_update",
                detail: format!("{} target tensors vs {} source tensors", dst.len(), src.len()),
            });
        }
        for (t, s) in dst.iter_mut().zip(src) {
            ema_tensors(t, s, xi)?;
        }
    }
    let mut dst_layers = target.conv_layers_mut();
    let src_layers = source.conv_layers();
    for (t, s) in dst_layers.iter_mut().zip(src_layers) {
        t.run_mean = s.run_mean.clone();
        t.run_var = s.run_var.clone();
    }
    Ok(())
}

pub fn ema_update_classifier(target: &mut Classifier, source: &Classifier, xi: f64) -> Result<(), DiffError> {
    ema_update_backbone(&mut target.backbone, &source.backbone, xi)?;
    ema_tensors(&mut target.head_w, &source.head_w, xi)?;
    ema_tensors(&mut target.head_b, &source.head_b, xi)
}

/// EMA of the encoder view against the matching classifier prefix.
pub fn ema_update_encoder(encoder: &mut Backbone, source: &Classifier, xi: f64) -> Result<(), DiffError> {
    let l = encoder.stages.len();
    if l > source.backbone.stages.len() {
        return Err(DiffError::Shape {
            op: "ema_update",
            detail: format!("encoder has {} stages, classifier {}", l, source.backbone.stages.len()),
        });
    }
    let src_layers = source.backbone.prefix_layers(l);
    let mut dst_layers = encoder.conv_layers_mut();
    if src_layers.len() != dst_layers.len() {
        return Err(DiffError::Shape {
            op: "ema_update",
            detail: format!("{} encoder layers vs {} prefix layers", dst_layers.len(), src_layers.len()),
        });
    }
    for (dst, src) in dst_layers.iter_mut().zip(src_layers) {
        ema_tensors(&mut dst.weight, &src.weight, xi)?;
        ema_tensors(&mut dst.gamma, &src.gamma, xi)?;
        ema_tensors(&mut dst.beta, &src.beta, xi)?;
        dst.run_mean = src.run_mean.clone();
        dst.run_var = src.run_var.clone();
    }
    Ok(())
}

/// Cosine ramp of the EMA momentum from `xi_start` at step 0 to 1 at step
/// `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct XiSchedule {
    pub xi_start: f64,
    pub total_steps: u64,
}

impl XiSchedule {
    pub fn new(xi_start: f64, total_steps: u64) -> Self {
        XiSchedule { xi_start, total_steps }
    }

    /// xi(t) = 1 - (1 - xi_start) * (1 + cos(pi * t / T)) / 2, clamped past T.
    pub fn xi_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 1.0;
        }
        let frac = step as f64 / self.total_steps as f64;
        1.0 - (1.0 - self.xi_start) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
    }
}
