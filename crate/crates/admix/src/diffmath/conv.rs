//! 2-d convolution over `[B, C, H, W]` batches.

use super::{grad_buf, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

/// Output extent for one spatial dimension.
fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output-index range `lo..hi` such that `o * stride + k - pad` stays
/// inside `0..input`.
fn valid_range(input: usize, kernel_off: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
    let lo = if kernel_off >= pad {
        0
    } else {
        (pad - kernel_off).div_ceil(stride)
    };
    let hi = (input + pad - kernel_off).div_ceil(stride);
    (lo.min(out), hi.min(out))
}

impl Tape {
    /// Cross-correlation of `x[B, Ci, H, W]` with `w[Co, Ci, kh, kw]`,
    /// optional per-channel bias, square stride and zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(DiffError::Shape {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}", sx, sw),
            });
        }
        if stride == 0 {
            return Err(DiffError::Invalid { op: "conv2d", detail: "stride must be positive".into() });
        }
        let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ho, wo) = match (out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad)) {
            (Some(a), Some(bb)) => (a, bb),
            _ => {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("kernel {}x{} too large for input {}x{} with pad {}", kh, kw, h, wd, pad),
                })
            }
        };
        if let Some(bv) = bias {
            let sb = self.value(bv).shape();
            if sb != [co] {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} vs {} output channels", sb, co),
                });
            }
        }

        let xd = tx.data();
        let wdat = tw.data();
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for oc in 0..co {
                let out_base = (bi * co + oc) * ho * wo;
                for icn in 0..ci {
                    let x_base = (bi * ci + icn) * h * wd;
                    let w_base = (oc * ci + icn) * kh * kw;
                    for ki in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(h, ki, stride, pad, ho);
                        for kj in 0..kw {
                            let wv = wdat[w_base + ki * kw + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = valid_range(wd, kj, stride, pad, wo);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ki - pad;
                                let xrow = x_base + ih * wd;
                                let orow = out_base + oh * wo;
                                if stride == 1 {
                                    let iw_lo = ow_lo + kj - pad;
                                    let src = &xd[xrow + iw_lo..xrow + iw_lo + (ow_hi - ow_lo)];
                                    let dst = &mut out[orow + ow_lo..orow + ow_hi];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + kj - pad;
                                        out[orow + ow] += wv * xd[xrow + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for bi in 0..b {
                for oc in 0..co {
                    let base = (bi * co + oc) * ho * wo;
                    let v = bd[oc];
                    for o in out[base..base + ho * wo].iter_mut() {
                        *o += v;
                    }
                }
            }
        }
        let value = Tensor::from_vec(out, &[b, co, ho, wo])?;
        let mut ids = vec![x.0, w.0];
        if let Some(bv) = bias {
            ids.push(bv.0);
        }
        let needs = self.any_needs(&ids);
        Ok(self.push(
            value,
            OpRecord::Conv2d { x: x.0, w: w.0, bias: bias.map(|v| v.0), stride, pad },
            needs,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn vjp_conv2d(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    w: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
    gout: &[f64],
) {
    let sx = nodes[x].value.shape().to_vec();
    let sw = nodes[w].value.shape().to_vec();
    let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
    let ho = out_dim(h, kh, stride, pad).unwrap();
    let wo = out_dim(wd, kw, stride, pad).unwrap();
    let xd = nodes[x].value.data();
    let wdat = nodes[w].value.data();

    if let Some(gb) = bias.and_then(|bv| grad_buf(nodes, grads, bv)) {
        for bi in 0..b {
            for oc in 0..co {
                let base = (bi * co + oc) * ho * wo;
                gb[oc] += gout[base..base + ho * wo].iter().sum::<f64>();
            }
        }
    }

    if let Some(gw) = grad_buf(nodes, grads, w) {
        for bi in 0..b {
            for oc in 0..co {
                let out_base = (bi * co + oc) * ho * wo;
                for icn in 0..ci {
                    let x_base = (bi * ci + icn) * h * wd;
                    let w_base = (oc * ci + icn) * kh * kw;
                    for ki in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(h, ki, stride, pad, ho);
                        for kj in 0..kw {
                            let (ow_lo, ow_hi) = valid_range(wd, kj, stride, pad, wo);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ki - pad;
                                let xrow = x_base + ih * wd;
                                let orow = out_base + oh * wo;
                                if stride == 1 {
                                    let iw_lo = ow_lo + kj - pad;
                                    let src = &xd[xrow + iw_lo..xrow + iw_lo + (ow_hi - ow_lo)];
                                    let g = &gout[orow + ow_lo..orow + ow_hi];
                                    for (gv, s) in g.iter().zip(src) {
                                        acc += gv * s;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + kj - pad;
                                        acc += gout[orow + ow] * xd[xrow + iw];
                                    }
                                }
                            }
                            gw[w_base + ki * kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }

    if let Some(gx) = grad_buf(nodes, grads, x) {
        for bi in 0..b {
            for oc in 0..co {
                let out_base = (bi * co + oc) * ho * wo;
                for icn in 0..ci {
                    let x_base = (bi * ci + icn) * h * wd;
                    let w_base = (oc * ci + icn) * kh * kw;
                    for ki in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(h, ki, stride, pad, ho);
                        for kj in 0..kw {
                            let wv = wdat[w_base + ki * kw + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = valid_range(wd, kj, stride, pad, wo);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ki - pad;
                                let xrow = x_base + ih * wd;
                                let orow = out_base + oh * wo;
                                if stride == 1 {
                                    let iw_lo = ow_lo + kj - pad;
                                    let dst = &mut gx[xrow + iw_lo..xrow + iw_lo + (ow_hi - ow_lo)];
                                    let g = &gout[orow + ow_lo..orow + ow_hi];
                                    for (d, gv) in dst.iter_mut().zip(g) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + kj - pad;
                                        gx[xrow + iw] += wv * gout[orow + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
