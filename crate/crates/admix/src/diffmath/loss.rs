//! Softmax, soft-target cross entropy, and cosine similarity.

use super::{grad_buf, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    /// Softmax along `axis`. Entries along the axis are positive and sum
    /// to 1; the result is invariant to adding a constant along the axis.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(DiffError::Invalid {
                op: "softmax",
                detail: format!("axis {} out of range for {:?}", axis, tx.shape()),
            });
        }
        if let Some(c) = tx.first_non_finite() {
            return Err(DiffError::NonFinite { op: "softmax", coord: Some(c) });
        }
        let (outer, len, inner) = lane_geometry(tx.shape(), axis);
        let mut out = vec![0.0; tx.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(tx.data()[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (tx.data()[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::from_vec(out, tx.shape())?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Softmax { x: x.0, axis }, needs))
    }

    /// Cross entropy of logits against a fixed target distribution.
    ///
    /// For `[K]` logits returns a scalar; for `[B, K]` logits and `[B, K]`
    /// targets returns the per-row losses `[B]`. Targets must be
    /// nonnegative and each row must sum to 1 within 1e-6.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor) -> Result<Var, DiffError> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(DiffError::Shape {
                op: "cross_entropy_soft",
                detail: format!("logits {:?} vs targets {:?}", tl.shape(), targets.shape()),
            });
        }
        let (rows, k) = match tl.shape() {
            [k] => (1usize, *k),
            [b, k] => (*b, *k),
            other => {
                return Err(DiffError::Shape {
                    op: "cross_entropy_soft",
                    detail: format!("expected [K] or [B, K], got {:?}", other),
                })
            }
        };
        if let Some(c) = tl.first_non_finite() {
            return Err(DiffError::NonFinite { op: "cross_entropy_soft", coord: Some(c) });
        }
        for r in 0..rows {
            let row = &targets.data()[r * k..(r + 1) * k];
            if row.iter().any(|v| *v < 0.0) {
                return Err(DiffError::Invalid {
                    op: "cross_entropy_soft",
                    detail: format!("target row {} has a negative entry", r),
                });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(DiffError::Invalid {
                    op: "cross_entropy_soft",
                    detail: format!("target row {} sums to {}, not 1", r, s),
                });
            }
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut losses = vec![0.0; rows];
        for r in 0..rows {
            let lrow = &tl.data()[r * k..(r + 1) * k];
            let trow = &targets.data()[r * k..(r + 1) * k];
            let m = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lrow.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            let dot: f64 = lrow.iter().zip(trow).map(|(l, t)| l * t).sum();
            losses[r] = lse - dot;
            for j in 0..k {
                probs[r * k + j] = (lrow[j] - lse).exp();
            }
        }
        let value = if tl.shape().len() == 1 {
            Tensor::scalar(losses[0])
        } else {
            Tensor::from_vec(losses, &[rows])?
        };
        let needs = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            value,
            OpRecord::CrossEntropy { logits: logits.0, probs, targets: targets.clone() },
            needs,
        ))
    }

    /// Cosine similarity of two vectors, in `[-1, 1]`. Zero-norm inputs are
    /// rejected rather than smoothed over.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(DiffError::Shape {
                op: "cosine_similarity",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        for (t, name) in [(ta, "first"), (tb, "second")] {
            if let Some(c) = t.first_non_finite() {
                return Err(DiffError::NonFinite { op: "cosine_similarity", coord: Some(c) });
            }
            let norm: f64 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(DiffError::Invalid {
                    op: "cosine_similarity",
                    detail: format!("{} input has zero norm", name),
                });
            }
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let na: f64 = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.any_needs(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(dot / (na * nb)), OpRecord::Cosine { a: a.0, b: b.0 }, needs))
    }
}

pub(super) fn vjp_softmax(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    axis: usize,
    out_id: usize,
    gout: &[f64],
) {
    let y = nodes[out_id].value.data();
    let shape = nodes[out_id].value.shape();
    let (outer, len, inner) = lane_geometry(shape, axis);
    if let Some(g) = grad_buf(nodes, grads, x) {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut dot = 0.0;
                for k in 0..len {
                    dot += gout[idx(k)] * y[idx(k)];
                }
                for k in 0..len {
                    g[idx(k)] += y[idx(k)] * (gout[idx(k)] - dot);
                }
            }
        }
    }
}

pub(super) fn vjp_cross_entropy(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    logits: usize,
    probs: &[f64],
    targets: &Tensor,
    gout: &[f64],
) {
    let shape = nodes[logits].value.shape();
    let (rows, k) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
    if let Some(g) = grad_buf(nodes, grads, logits) {
        for r in 0..rows {
            let gr = gout[r];
            for j in 0..k {
                let i = r * k + j;
                g[i] += gr * (probs[i] - targets.data()[i]);
            }
        }
    }
}

pub(super) fn vjp_cosine(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    b: usize,
    gout: &[f64],
) {
    let ad = nodes[a].value.data();
    let bd = nodes[b].value.data();
    let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
    let na: f64 = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = dot / (na * nb);
    let g0 = gout[0];
    if let Some(g) = grad_buf(nodes, grads, a) {
        for i in 0..g.len() {
            g[i] += g0 * (bd[i] / (na * nb) - cos * ad[i] / (na * na));
        }
    }
    if let Some(g) = grad_buf(nodes, grads, b) {
        for i in 0..g.len() {
            g[i] += g0 * (ad[i] / (na * nb) - cos * bd[i] / (nb * nb));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ln2_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![2.0f64.ln(), 0.0], &[2]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let out = t.value(y).data();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![f64::NAN, 0.0], &[2]).unwrap());
        assert!(matches!(t.softmax(x, 0), Err(DiffError::NonFinite { coord: Some(0), .. })));
        let ok = t.leaf(Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
        assert!(t.softmax(ok, 1).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let vals = vec![0.3, -1.0, 2.0, 0.7];
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vals.clone(), &[4]).unwrap());
        let b = t.leaf(Tensor::from_vec(vals.iter().map(|v| v + 11.5).collect(), &[4]).unwrap());
        let ya = t.softmax(a, 0).unwrap();
        let yb = t.softmax(b, 0).unwrap();
        let diff: f64 = t
            .value(ya)
            .data()
            .iter()
            .zip(t.value(yb).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[4]));
        let target = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4], &[4]).unwrap();
        let l = t.cross_entropy_soft(x, &target).unwrap();
        assert!((t.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_tends_to_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![40.0, 0.0], &[2]).unwrap());
        let target = Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap();
        let l = t.cross_entropy_soft(x, &target).unwrap();
        assert!(t.value(l).item() < 1e-15);
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        // independent scalar arithmetic for logits [1, -1], target [0.7, 0.3]
        let lse = (1.0f64.exp() + (-1.0f64).exp()).ln();
        let expect = lse - (0.7 * 1.0 - 0.3 * 1.0);
        assert!((expect - 0.726_928_011_042_972_5).abs() < 1e-12);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, -1.0], &[2]).unwrap());
        let target = Tensor::from_vec(vec![0.7, 0.3], &[2]).unwrap();
        let l = t.cross_entropy_soft(x, &target).unwrap();
        assert!((t.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_unnormalized_target() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        let target = Tensor::from_vec(vec![0.7, 0.4], &[2]).unwrap();
        assert!(t.cross_entropy_soft(x, &target).is_err());
        let neg = Tensor::from_vec(vec![1.5, -0.5], &[2]).unwrap();
        assert!(t.cross_entropy_soft(x, &neg).is_err());
    }

    #[test]
    fn cosine_identical_orthogonal_and_diagonal() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap());
        let c = t.cosine_similarity(a, a).unwrap();
        assert!((t.value(c).item() - 1.0).abs() < 1e-12);

        let e1 = t.leaf(Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap());
        let e2 = t.leaf(Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap());
        let c2 = t.cosine_similarity(e1, e2).unwrap();
        assert_eq!(t.value(c2).item(), 0.0);

        let d = t.leaf(Tensor::from_vec(vec![1.0, 1.0], &[2]).unwrap());
        let c3 = t.cosine_similarity(e1, d).unwrap();
        assert!((t.value(c3).item() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap());
        let b = t.leaf(Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap());
        assert!(t.cosine_similarity(a, b).is_err());
    }

    #[test]
    fn batched_cross_entropy_returns_per_row_losses() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.0, 0.0, 5.0, 0.0], &[2, 2]).unwrap());
        let targets = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0], &[2, 2]).unwrap();
        let l = t.cross_entropy_soft(x, &targets).unwrap();
        assert_eq!(t.shape_of(l), &[2]);
        let out = t.value(l).data();
        assert!((out[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!(out[1] < 0.01);
    }
}
