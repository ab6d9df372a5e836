//! Shape manipulation: reshape, 2-d transpose, concatenation, axis-0 select.

use super::{grad_buf, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != tx.numel() {
            return Err(DiffError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", tx.shape(), shape),
            });
        }
        let value = Tensor::from_vec(tx.data().to_vec(), shape)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Reshape { x: x.0 }, needs))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 2 {
            return Err(DiffError::Shape {
                op: "transpose2",
                detail: format!("expected matrix, got {:?}", s),
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data()[i * n + j];
            }
        }
        let value = Tensor::from_vec(data, &[n, m])?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Transpose2 { x: x.0 }, needs))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::Invalid { op: "concat", detail: "no inputs".into() });
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(DiffError::Invalid {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(DiffError::Shape {
                    op: "concat",
                    detail: format!("{:?} incompatible with {:?} along axis {}", s, first, axis),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &x in xs {
            let s = self.value(x).shape().to_vec();
            let rows = s[axis];
            let src = self.value(x).data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * rows * inner;
                data[dst_base..dst_base + rows * inner]
                    .copy_from_slice(&src[src_base..src_base + rows * inner]);
            }
            offset += rows;
        }
        let value = Tensor::from_vec(data, &out_shape)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.any_needs(&ids);
        Ok(self.push(value, OpRecord::Concat { xs: ids, axis }, needs))
    }

    /// Picks index `i` along the leading axis, dropping that axis.
    pub fn select0(&mut self, x: Var, index: usize) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.is_empty() || index >= s[0] {
            return Err(DiffError::Invalid {
                op: "select0",
                detail: format!("index {} out of range for {:?}", index, s),
            });
        }
        let inner: usize = s[1..].iter().product();
        let data = tx.data()[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::from_vec(data, &s[1..])?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Select0 { x: x.0, index }, needs))
    }
}

pub(super) fn vjp_reshape(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, gout: &[f64]) {
    if let Some(g) = grad_buf(nodes, grads, x) {
        for (gi, go) in g.iter_mut().zip(gout) {
            *gi += go;
        }
    }
}

pub(super) fn vjp_transpose2(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, gout: &[f64]) {
    let s = nodes[x].value.shape().to_vec();
    let (m, n) = (s[0], s[1]);
    if let Some(g) = grad_buf(nodes, grads, x) {
        for i in 0..m {
            for j in 0..n {
                g[i * n + j] += gout[j * m + i];
            }
        }
    }
}

pub(super) fn vjp_concat(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    xs: &[usize],
    axis: usize,
    gout: &[f64],
) {
    let first = nodes[xs[0]].value.shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let axis_total: usize = xs.iter().map(|&x| nodes[x].value.shape()[axis]).sum();
    let mut offset = 0;
    for &x in xs {
        let rows = nodes[x].value.shape()[axis];
        if let Some(g) = grad_buf(nodes, grads, x) {
            for o in 0..outer {
                let src_base = (o * axis_total + offset) * inner;
                let dst_base = o * rows * inner;
                for i in 0..rows * inner {
                    g[dst_base + i] += gout[src_base + i];
                }
            }
        }
        offset += rows;
    }
}

pub(super) fn vjp_select0(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    index: usize,
    gout: &[f64],
) {
    let s = nodes[x].value.shape();
    let inner: usize = s[1..].iter().product();
    if let Some(g) = grad_buf(nodes, grads, x) {
        for i in 0..inner {
            g[index * inner + i] += gout[i];
        }
    }
}
