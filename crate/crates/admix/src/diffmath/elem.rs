//! Elementwise and reduction operations.

use super::{grad_buf, DiffError, Node, OpRecord, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DiffError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(data, ta.shape())?;
        let needs = self.any_needs(&[a.0, b.0]);
        Ok(self.push(value, OpRecord::Add { a: a.0, b: b.0 }, needs))
    }

    /// Hadamard product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DiffError::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(data, ta.shape())?;
        let needs = self.any_needs(&[a.0, b.0]);
        Ok(self.push(value, OpRecord::Mul { a: a.0, b: b.0 }, needs))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "scale", coord: None });
        }
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(data, tx.shape())?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Scale { x: x.0, c }, needs))
    }

    /// Multiplies a `[C, H, W]` value by an `[H, W]` plane, broadcast over
    /// channels.
    pub fn mul_plane(&mut self, x: Var, plane: Var) -> Result<Var, DiffError> {
        let (tx, tp) = (self.value(x), self.value(plane));
        let xs = tx.shape();
        if xs.len() != 3 || tp.shape() != &xs[1..] {
            return Err(DiffError::Shape {
                op: "mul_plane",
                detail: format!("value {:?} vs plane {:?}", xs, tp.shape()),
            });
        }
        let hw = xs[1] * xs[2];
        let mut data = vec![0.0; tx.numel()];
        for c in 0..xs[0] {
            let base = c * hw;
            for i in 0..hw {
                data[base + i] = tx.data()[base + i] * tp.data()[i];
            }
        }
        let value = Tensor::from_vec(data, xs)?;
        let needs = self.any_needs(&[x.0, plane.0]);
        Ok(self.push(value, OpRecord::MulPlane { x: x.0, plane: plane.0 }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_vec(data, tx.shape())?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::Relu { x: x.0 }, needs))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::scalar(total), OpRecord::Sum { x: x.0 }, needs))
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(DiffError::Invalid { op: "mean", detail: "empty input".into() });
        }
        let m = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::scalar(m), OpRecord::Mean { x: x.0 }, needs))
    }

    /// Spatial mean per channel: `[B, C, H, W]` to `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(DiffError::Shape {
                op: "global_avg_pool",
                detail: format!("expected 4-d input, got {:?}", s),
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = vec![0.0; b * c];
        for i in 0..b * c {
            let base = i * hw;
            data[i] = tx.data()[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::from_vec(data, &[b, c])?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, OpRecord::GlobalAvgPool { x: x.0 }, needs))
    }
}

pub(super) fn vjp_add(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: usize, b: usize, gout: &[f64]) {
    for t in [a, b] {
        if let Some(g) = grad_buf(nodes, grads, t) {
            for (gi, go) in g.iter_mut().zip(gout) {
                *gi += go;
            }
        }
    }
}

pub(super) fn vjp_mul(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: usize, b: usize, gout: &[f64]) {
    let (da, db) = (nodes[a].value.data(), nodes[b].value.data());
    if let Some(g) = grad_buf(nodes, grads, a) {
        for i in 0..g.len() {
            g[i] += gout[i] * db[i];
        }
    }
    if let Some(g) = grad_buf(nodes, grads, b) {
        for i in 0..g.len() {
            g[i] += gout[i] * da[i];
        }
    }
}

pub(super) fn vjp_scale(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, c: f64, gout: &[f64]) {
    if let Some(g) = grad_buf(nodes, grads, x) {
        for (gi, go) in g.iter_mut().zip(gout) {
            *gi += c * go;
        }
    }
}

pub(super) fn vjp_mul_plane(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    plane: usize,
    gout: &[f64],
) {
    let xs = nodes[x].value.shape().to_vec();
    let hw = xs[1] * xs[2];
    let xd = nodes[x].value.data();
    let pd = nodes[plane].value.data();
    if let Some(g) = grad_buf(nodes, grads, x) {
        for c in 0..xs[0] {
            let base = c * hw;
            for i in 0..hw {
                g[base + i] += gout[base + i] * pd[i];
            }
        }
    }
    if let Some(g) = grad_buf(nodes, grads, plane) {
        for c in 0..xs[0] {
            let base = c * hw;
            for i in 0..hw {
                g[i] += gout[base + i] * xd[base + i];
            }
        }
    }
}

pub(super) fn vjp_relu(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, gout: &[f64]) {
    let xd = nodes[x].value.data();
    if let Some(g) = grad_buf(nodes, grads, x) {
        for i in 0..g.len() {
            if xd[i] > 0.0 {
                g[i] += gout[i];
            }
        }
    }
}

pub(super) fn vjp_sum(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, gout: &[f64]) {
    if let Some(g) = grad_buf(nodes, grads, x) {
        for gi in g.iter_mut() {
            *gi += gout[0];
        }
    }
}

pub(super) fn vjp_mean(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, gout: &[f64]) {
    let n = nodes[x].value.numel() as f64;
    if let Some(g) = grad_buf(nodes, grads, x) {
        let v = gout[0] / n;
        for gi in g.iter_mut() {
            *gi += v;
        }
    }
}

pub(super) fn vjp_global_avg_pool(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    gout: &[f64],
) {
    let s = nodes[x].value.shape().to_vec();
    let hw = s[2] * s[3];
    if let Some(g) = grad_buf(nodes, grads, x) {
        for i in 0..s[0] * s[1] {
            let v = gout[i] / hw as f64;
            let base = i * hw;
            for gi in g[base..base + hw].iter_mut() {
                *gi += v;
            }
        }
    }
}
