//! Reverse-mode differentiation over a recorded computation.
//!
//! Values are pushed onto a [`Tape`] as they are computed. Each node stores
//! its forward value plus the operation record needed to run the reverse
//! rule. Calling [`Tape::backward`] on a scalar root sweeps the records in
//! reverse creation order (a valid reverse topological order, since every
//! operation only refers to earlier nodes) and accumulates gradients into
//! every node on a path from a trainable leaf to the root.
//!
//! Gradient propagation is pruned: a node participates in the sweep only if
//! some trainable leaf feeds it. Leaves registered with [`Tape::leaf`] never
//! receive gradient, which is how frozen parameter sets (teacher, encoder)
//! are kept out of every update by construction.
//!
//! The tape is meant to live for one forward/backward pass and be dropped;
//! nothing persists between steps.

// The gradient rules walk several parallel buffers at shared offsets; index
// loops are the clearest way to write them.
#![allow(clippy::needless_range_loop)]

mod conv;
mod elem;
mod linalg;
mod loss;
pub mod norm;
mod resize;
mod shape_ops;

pub mod check;

pub use check::{grad_check, grad_check_many};

use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: non-finite value{}", match coord { Some(c) => format!(" at flat index {c}"), None => String::new() })]
    NonFinite { op: &'static str, coord: Option<usize> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: OpRecord,
    pub needs_grad: bool,
}

/// Mode for batch normalization: `Batch` normalizes with statistics of the
/// current activations, `Running` with externally supplied ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

pub(crate) enum OpRecord {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MulPlane { x: usize, plane: usize },
    Relu { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    Transpose2 { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Select0 { x: usize, index: usize },
    Matmul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    GlobalAvgPool { x: usize },
    Softmax { x: usize, axis: usize },
    CrossEntropy { logits: usize, probs: Vec<f64>, targets: Tensor },
    Cosine { a: usize, b: usize },
    Upsample { x: usize },
}

/// The computation record: forward values plus per-node gradient slots.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a constant input. No gradient will ever be accumulated for
    /// it, and subgraphs that depend only on constants are skipped entirely
    /// during the backward sweep.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, OpRecord::Leaf, false)
    }

    /// Registers a trainable input: a gradient accumulator target.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, OpRecord::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v` after a backward sweep, if any reached it.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor of its shape, zeros if none accumulated.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(g.clone(), &shape).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clears every gradient accumulator while keeping the recorded values,
    /// so another backward sweep can be run from scratch.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Runs the reverse sweep from a scalar root. Gradients accumulate into
    /// every node that both feeds the root and depends on a trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let root_id = root.0;
        if self.nodes[root_id].value.numel() != 1 {
            return Err(DiffError::Invalid {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.nodes[root_id].value.shape()),
            });
        }
        if !self.nodes[root_id].value.is_finite() {
            return Err(DiffError::NonFinite { op: "backward", coord: Some(0) });
        }
        if !self.nodes[root_id].needs_grad {
            return Ok(());
        }
        match &mut self.grads[root_id] {
            Some(g) => g[0] += 1.0,
            None => self.grads[root_id] = Some(vec![1.0]),
        }
        for id in (0..=root_id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = std::mem::take(&mut self.grads[id]) else {
                continue;
            };
            dispatch_vjp(&self.nodes, &mut self.grads, id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    /// Order-stable hash of the sign pattern of every ReLU input on a
    /// differentiable path. Central-difference checks compare the
    /// signatures of the two perturbed evaluations: a mismatch means a
    /// kink sits inside the perturbation interval and the estimate for
    /// that coordinate is invalid.
    pub fn relu_sign_signature(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let OpRecord::Relu { x } = node.op {
                if self.nodes[x].needs_grad {
                    for v in self.nodes[x].value.data() {
                        hash ^= u64::from(*v > 0.0);
                        hash = hash.wrapping_mul(0x1000_0000_01b3);
                    }
                }
            }
        }
        hash
    }

    pub(crate) fn push(&mut self, value: Tensor, op: OpRecord, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }
}

/// Gradient buffer of node `t`, allocated on first touch. `None` when the
/// node takes no gradient, so callers skip the work.
pub(crate) fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    t: usize,
) -> Option<&'a mut [f64]> {
    if !nodes[t].needs_grad {
        return None;
    }
    let n = nodes[t].value.numel();
    Some(grads[t].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn dispatch_vjp(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, gout: &[f64]) {
    match &nodes[id].op {
        OpRecord::Leaf => {}
        OpRecord::Add { a, b } => elem::vjp_add(nodes, grads, *a, *b, gout),
        OpRecord::Mul { a, b } => elem::vjp_mul(nodes, grads, *a, *b, gout),
        OpRecord::Scale { x, c } => elem::vjp_scale(nodes, grads, *x, *c, gout),
        OpRecord::MulPlane { x, plane } => elem::vjp_mul_plane(nodes, grads, *x, *plane, gout),
        OpRecord::Relu { x } => elem::vjp_relu(nodes, grads, *x, gout),
        OpRecord::Sum { x } => elem::vjp_sum(nodes, grads, *x, gout),
        OpRecord::Mean { x } => elem::vjp_mean(nodes, grads, *x, gout),
        OpRecord::Reshape { x } => shape_ops::vjp_reshape(nodes, grads, *x, gout),
        OpRecord::Transpose2 { x } => shape_ops::vjp_transpose2(nodes, grads, *x, gout),
        OpRecord::Concat { xs, axis } => shape_ops::vjp_concat(nodes, grads, xs, *axis, gout),
        OpRecord::Select0 { x, index } => shape_ops::vjp_select0(nodes, grads, *x, *index, gout),
        OpRecord::Matmul { a, b } => linalg::vjp_matmul(nodes, grads, *a, *b, gout),
        OpRecord::Linear { x, w, b } => linalg::vjp_linear(nodes, grads, *x, *w, *b, gout),
        OpRecord::Conv2d { x, w, bias, stride, pad } => {
            conv::vjp_conv2d(nodes, grads, *x, *w, *bias, *stride, *pad, gout)
        }
        OpRecord::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
            norm::vjp_batch_norm(nodes, grads, *x, *gamma, *beta, xhat, inv_std, *batch, gout)
        }
        OpRecord::GlobalAvgPool { x } => elem::vjp_global_avg_pool(nodes, grads, *x, gout),
        OpRecord::Softmax { x, axis } => loss::vjp_softmax(nodes, grads, *x, *axis, id, gout),
        OpRecord::CrossEntropy { logits, probs, targets } => {
            loss::vjp_cross_entropy(nodes, grads, *logits, probs, targets, gout)
        }
        OpRecord::Cosine { a, b } => loss::vjp_cosine(nodes, grads, *a, *b, gout),
        OpRecord::Upsample { x } => resize::vjp_upsample(nodes, grads, *x, id, gout),
    }
}
