//! Matrix multiply and the fused affine layer.

use super::{grad_buf, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Tape {
    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        mm_nn_acc(ta.data(), tb.data(), &mut data, m, k, n);
        let value = Tensor::from_vec(data, &[m, n])?;
        let needs = self.any_needs(&[a.0, b.0]);
        Ok(self.push(value, OpRecord::Matmul { a: a.0, b: b.0 }, needs))
    }

    /// Affine layer `x[b, f] * w[k, f]^T + bias[k] -> [b, k]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, DiffError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let (sx, sw, sb) = (tx.shape(), tw.shape(), tb.shape());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(DiffError::Shape {
                op: "linear",
                detail: format!("x {:?}, w {:?}, bias {:?}", sx, sw, sb),
            });
        }
        let (b, f, k) = (sx[0], sx[1], sw[0]);
        let mut data = vec![0.0; b * k];
        mm_nt_acc(tx.data(), tw.data(), &mut data, b, f, k);
        for row in 0..b {
            for j in 0..k {
                data[row * k + j] += tb.data()[j];
            }
        }
        let value = Tensor::from_vec(data, &[b, k])?;
        let needs = self.any_needs(&[x.0, w.0, bias.0]);
        Ok(self.push(value, OpRecord::Linear { x: x.0, w: w.0, b: bias.0 }, needs))
    }
}

pub(super) fn vjp_matmul(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: usize, b: usize, gout: &[f64]) {
    let sa = nodes[a].value.shape().to_vec();
    let sb = nodes[b].value.shape().to_vec();
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let ad = nodes[a].value.data();
    let bd = nodes[b].value.data();
    if let Some(g) = grad_buf(nodes, grads, a) {
        // dA = G * B^T
        mm_nt_acc(gout, bd, g, m, n, k);
    }
    if let Some(g) = grad_buf(nodes, grads, b) {
        // dB = A^T * G
        mm_tn_acc(ad, gout, g, m, k, n);
    }
}

pub(super) fn vjp_linear(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    w: usize,
    b: usize,
    gout: &[f64],
) {
    let sx = nodes[x].value.shape().to_vec();
    let sw = nodes[w].value.shape().to_vec();
    let (rows, f, k) = (sx[0], sx[1], sw[0]);
    let xd = nodes[x].value.data();
    let wd = nodes[w].value.data();
    if let Some(g) = grad_buf(nodes, grads, x) {
        // dX = G[rows,k] * W[k,f]
        mm_nn_acc(gout, wd, g, rows, k, f);
    }
    if let Some(g) = grad_buf(nodes, grads, w) {
        // dW = G^T[k,rows] * X[rows,f]
        mm_tn_acc(gout, xd, g, rows, k, f);
    }
    if let Some(g) = grad_buf(nodes, grads, b) {
        for row in 0..rows {
            for j in 0..k {
                g[j] += gout[row * k + j];
            }
        }
    }
}
