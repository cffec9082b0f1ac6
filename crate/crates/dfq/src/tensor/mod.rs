//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Every op allocates a fresh immutable tensor; when an input requires
//! gradients the op also records a tape node (op tag + input handles +
//! whatever the backward rule needs). `backward` walks reachable nodes in
//! exact reverse creation order — creation order is topological, so each
//! node's output gradient is complete before the node is visited — and
//! accumulates leaf gradients into the tensors' grad slots.
//!
//! Reductions accumulate in f64 and always run in a fixed sequential index
//! order, so results are bitwise reproducible run to run and independent of
//! worker-thread count (see `parallel`).

mod gemm;
mod op;
mod spatial;

pub(crate) use op::{Node, Op};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    parent: Option<Node>,
}

/// Cheaply clonable handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn fresh(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, parent: Option<Node>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            grad: Mutex::new(None),
            requires_grad,
            parent,
        }))
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "from_vec: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::fresh(data, shape.to_vec(), false, None)
    }

    /// Trainable leaf: participates in `backward` and owns a grad slot.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::fresh(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    /// Result of an op. Records a tape node only when a gradient can flow.
    pub(crate) fn from_op(data: Vec<f32>, shape: Vec<usize>, op: Op, inputs: Vec<Tensor>) -> Self {
        let requires_grad = inputs.iter().any(|t| t.0.requires_grad);
        let parent = requires_grad.then(|| Node { op, inputs });
        Self::fresh(data, shape, requires_grad, parent)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same data, cut loose from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            grad: Mutex::new(None),
            requires_grad: false,
            parent: None,
        }))
    }

    /// Copy this value into a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::param(self.0.data.as_ref().clone(), &self.0.shape)
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Row-major argmax over the whole tensor.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in self.0.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }

    /// Per-row argmax of a 2-D tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape().len(), 2, "argmax_rows on {:?}", self.shape());
        let cols = self.shape()[1];
        self.data()
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                let mut best_v = f32::NEG_INFINITY;
                for (i, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate
    /// across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar root".into(),
                got: self.shape().to_vec(),
            });
        }
        if !self.0.requires_grad {
            return Ok(()); // nothing upstream wants gradients
        }

        // Reachable differentiable subgraph, then exact reverse creation order.
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || seen.insert(t.0.id, ()).is_some() {
                continue;
            }
            if let Some(node) = &t.0.parent {
                for inp in &node.inputs {
                    stack.push(inp.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut store = GradStore::default();
        store.seed(self.0.id);
        for t in &nodes {
            let Some(g) = store.take(t.0.id) else { continue };
            match &t.0.parent {
                Some(node) => op::backward_op(t, node, &g, &mut store)?,
                None => {
                    let mut slot = t.0.grad.lock().unwrap();
                    match slot.as_mut() {
                        Some(buf) => {
                            for (a, b) in buf.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient accumulator for one backward sweep, keyed by tensor id.
#[derive(Default)]
pub(crate) struct GradStore {
    grads: HashMap<u64, Vec<f32>>,
}

impl GradStore {
    fn seed(&mut self, id: u64) {
        self.grads.insert(id, vec![1.0]);
    }

    fn take(&mut self, id: u64) -> Option<Vec<f32>> {
        self.grads.remove(&id)
    }

    /// Accumulate a contribution for `target` if it participates in the tape.
    pub(crate) fn add(&mut self, target: &Tensor, contrib: Vec<f32>) {
        if !target.0.requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), target.numel());
        match self.grads.get_mut(&target.0.id) {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(target.0.id, contrib);
            }
        }
    }

    /// Accumulate via a filler that writes into a zeroed buffer in place.
    pub(crate) fn add_with(&mut self, target: &Tensor, fill: impl FnOnce(&mut [f32])) {
        if !target.0.requires_grad {
            return;
        }
        let buf = self
            .grads
            .entry(target.0.id)
            .or_insert_with(|| vec![0.0; target.numel()]);
        fill(buf);
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::BadShape {
            op,
            expected: "2-D tensor".into(),
            got: other.to_vec(),
        }),
    }
}

pub(crate) fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::BadShape {
            op,
            expected: "4-D NCHW tensor".into(),
            got: other.to_vec(),
        }),
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    op::concat_channels(parts)
}

pub use op::stack_scalars;
pub(crate) use op::fake_quant_op as fake_quant;
pub use spatial::conv2d;
