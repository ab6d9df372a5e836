//! Bilinear upsampling of plane stacks.
//!
//! Uses the half-pixel (align-corners = false) source mapping. Every output
//! pixel is a convex combination of at most four source pixels, and the
//! interpolation weights depend only on the spatial geometry, so they are
//! shared across the leading axis.

use super::{grad_buf, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

/// Per-output-index source pair and blend weight for one axis.
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Tape {
    /// Resizes `x[N, h, w]` to `[N, H, W]` with `H >= h`, `W >= w`.
    pub fn upsample_bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(DiffError::Shape {
                op: "upsample_bilinear",
                detail: format!("expected [N, h, w], got {:?}", s),
            });
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let (th, tw) = target;
        if th < h || tw < w || th == 0 || tw == 0 {
            return Err(DiffError::Invalid {
                op: "upsample_bilinear",
                detail: format!("target {}x{} smaller than source {}x{}", th, tw, h, w),
            });
        }
        let ys = axis_table(h, th);
        let xs = axis_table(w, tw);
        let mut out = vec![0.0; n * th * tw];
        for p in 0..n {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * th * tw..(p + 1) * th * tw];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx_)) in xs.iter().enumerate() {
                    let a = src[y0 * w + x0];
                    let b = src[y0 * w + x1];
                    let c = src[y1 * w + x0];
                    let d = src[y1 * w + x1];
                    let top = a + (b - a) * tx_;
                    let bot = c + (d - c) * tx_;
                    dst[oy * tw + ox] = top + (bot - top) * ty;
                }
            }
        }
        let value = Tensor::from_vec(out, &[n, th, tw])?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Upsample { x: x.0 }, needs))
    }
}

pub(super) fn vjp_upsample(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    out_id: usize,
    gout: &[f64],
) {
    let src_shape = nodes[x].value.shape().to_vec();
    let dst_shape = nodes[out_id].value.shape().to_vec();
    let (n, h, w) = (src_shape[0], src_shape[1], src_shape[2]);
    let (th, tw) = (dst_shape[1], dst_shape[2]);
    let ys = axis_table(h, th);
    let xs = axis_table(w, tw);
    if let Some(g) = grad_buf(nodes, grads, x) {
        for p in 0..n {
            let gsrc = &mut g[p * h * w..(p + 1) * h * w];
            let gdst = &gout[p * th * tw..(p + 1) * th * tw];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx_)) in xs.iter().enumerate() {
                    let go = gdst[oy * tw + ox];
                    gsrc[y0 * w + x0] += go * (1.0 - ty) * (1.0 - tx_);
                    gsrc[y0 * w + x1] += go * (1.0 - ty) * tx_;
                    gsrc[y1 * w + x0] += go * ty * (1.0 - tx_);
                    gsrc[y1 * w + x1] += go * ty * tx_;
                }
            }
        }
    }
}
