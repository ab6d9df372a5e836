//! Batch normalization in training (batch statistics) and inference
//! (supplied statistics) modes.

use super::{grad_buf, BnMode, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

/// Per-channel statistics of one normalization, reported back to the caller
/// so running buffers can be updated outside the tape.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for the normalization itself.
    pub var: Vec<f64>,
    /// Reduction-set size per channel.
    pub count: usize,
}

impl Tape {
    /// Normalizes `x[B, C, H, W]` per channel. In `Batch` mode statistics
    /// come from `x` itself and are returned; in `Running` mode the supplied
    /// `stats` are used and echoed back.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, BnStats), DiffError> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 {
            return Err(DiffError::Shape {
                op: "batch_norm",
                detail: format!("expected 4-d input, got {:?}", s),
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(DiffError::Shape {
                op: "batch_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs {} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    c
                ),
            });
        }
        let m = b * hw;
        if m == 0 {
            return Err(DiffError::Invalid { op: "batch_norm", detail: "empty reduction set".into() });
        }

        let (mean, var) = match (mode, stats) {
            (BnMode::Batch, _) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        acc += tx.data()[base..base + hw].iter().sum::<f64>();
                    }
                    mean[ci] = acc / m as f64;
                    let mut vacc = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for &v in &tx.data()[base..base + hw] {
                            let d = v - mean[ci];
                            vacc += d * d;
                        }
                    }
                    var[ci] = vacc / m as f64;
                }
                (mean, var)
            }
            (BnMode::Running, Some((rm, rv))) => {
                if rm.len() != c || rv.len() != c {
                    return Err(DiffError::Shape {
                        op: "batch_norm",
                        detail: format!("running stats length {} vs {} channels", rm.len(), c),
                    });
                }
                (rm.to_vec(), rv.to_vec())
            }
            (BnMode::Running, None) => {
                return Err(DiffError::Invalid {
                    op: "batch_norm",
                    detail: "running mode requires statistics".into(),
                })
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (mu, is, g, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for i in base..base + hw {
                    let xh = (tx.data()[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }
        let value = Tensor::from_vec(out, &s)?;
        let needs = self.any_needs(&[x.0, gamma.0, beta.0]);
        let var_out = var.clone();
        let mean_out = mean;
        let node = self.push(
            value,
            OpRecord::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch: mode == BnMode::Batch,
            },
            needs,
        );
        Ok((node, BnStats { mean: mean_out, var: var_out, count: m }))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn vjp_batch_norm(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: &[f64],
    inv_std: &[f64],
    batch: bool,
    gout: &[f64],
) {
    let s = nodes[x].value.shape().to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = (b * hw) as f64;
    let gd = nodes[gamma].value.data();

    if let Some(g) = grad_buf(nodes, grads, beta) {
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                g[ci] += gout[base..base + hw].iter().sum::<f64>();
            }
        }
    }
    if let Some(g) = grad_buf(nodes, grads, gamma) {
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let mut acc = 0.0;
                for i in base..base + hw {
                    acc += gout[i] * xhat[i];
                }
                g[ci] += acc;
            }
        }
    }
    if nodes[x].needs_grad {
        if batch {
            // Per channel: dx = inv_std * (dxh - mean(dxh) - xhat * mean(dxh .* xhat))
            let mut sum_dxh = vec![0.0; c];
            let mut sum_dxh_xhat = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for i in base..base + hw {
                        let dxh = gout[i] * gd[ci];
                        sum_dxh[ci] += dxh;
                        sum_dxh_xhat[ci] += dxh * xhat[i];
                    }
                }
            }
            let g = grad_buf(nodes, grads, x).expect("x needs grad");
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let (is, ga) = (inv_std[ci], gd[ci]);
                    let m1 = sum_dxh[ci] / m;
                    let m2 = sum_dxh_xhat[ci] / m;
                    for i in base..base + hw {
                        let dxh = gout[i] * ga;
                        g[i] += is * (dxh - m1 - xhat[i] * m2);
                    }
                }
            }
        } else {
            let g = grad_buf(nodes, grads, x).expect("x needs grad");
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let k = gd[ci] * inv_std[ci];
                    for i in base..base + hw {
                        g[i] += gout[i] * k;
                    }
                }
            }
        }
    }
}
